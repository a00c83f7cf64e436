"""Online kernel strategy, baselines, backtesting and model files."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from . import _jsonio
from .meanvar import FitConfig, FittedWeights
from .paths import EmbeddingSpec, Path, PathBatch, embed, increments, prefix
from .pnlkernel import OperatorLift, _lift_for, gamma_map, gamma_rows, spec_fingerprint
from .sigkernel import KernelSpec, batch_signature_prefixes, sig_dim

MODEL_FORMAT = "kernel-trading-model"
MODEL_VERSION = 1
MAX_SIG_WORDS = 20000


@njit(cache=True)
def _apply_weights(g, alpha, scale):
    """scale * g @ alpha with a fixed summation order. g: (T, d, N)."""
    out = np.zeros((g.shape[0], g.shape[1]))
    for t in range(g.shape[0]):
        for m in range(g.shape[1]):
            s = 0.0
            for i in range(g.shape[2]):
                s += g[t, m, i] * alpha[i]
            out[t, m] = scale * s
    return out


@dataclass(frozen=True, eq=False)
class StrategyModel:
    """Fitted kernel strategy: xi_t = position_scale * Gamma(psi(X_{0..t})) alpha."""

    embedding: EmbeddingSpec
    kernel: KernelSpec
    lift: OperatorLift
    colocation: PathBatch
    weights: FittedWeights
    position_scale: float

    def __post_init__(self):
        if len(self.weights.alpha) != len(self.colocation):
            raise ValueError("weights length differs from co-location size")
        if not math.isfinite(self.position_scale):
            raise ValueError("position_scale must be finite")
        _lift_for(self.lift, self.colocation.dim)

    @classmethod
    def from_fit(cls, embedding: EmbeddingSpec, kernel: KernelSpec, lift: OperatorLift | None,
                 colocation: PathBatch, weights: FittedWeights) -> "StrategyModel":
        lift = _lift_for(lift, colocation.dim)
        return cls(embedding, kernel, lift, colocation, weights, 1.0 / len(colocation))

    def positions(self, path: Path, signal: Path | None = None) -> np.ndarray:
        """(L, d) positions at the left end of every increment."""
        g = gamma_rows(self.kernel, self.embedding, self.lift, path, self.colocation, signal)
        return _apply_weights(g[:-1], np.ascontiguousarray(self.weights.alpha), self.position_scale)


def position(model: StrategyModel, live: Path, t_index: int, signal: Path | None = None) -> np.ndarray:
    """Position at time index t from the samples 0..t of ``live``."""
    if not 0 <= t_index < len(live):
        raise IndexError("t_index outside the live path")
    g = gamma_map(model.kernel, model.embedding, model.lift, prefix(live, t_index),
                  model.colocation, signal).values
    return _apply_weights(g[None], np.ascontiguousarray(model.weights.alpha), model.position_scale)[0]


# ---------------------------------------------------------------- baselines

@dataclass(frozen=True, eq=False)
class SigTraderModel:
    """Positions linear in the truncated signature: xi_t = Sig(psi(X)_{0..t})^T ell."""

    order: int
    ell: np.ndarray
    embedding: EmbeddingSpec
    lam: float
    eta: float

    def positions(self, path: Path, signal: Path | None = None) -> np.ndarray:
        s = batch_signature_prefixes(embed(path, self.embedding, signal).values[None], self.order)[0]
        return s[:-1] @ self.ell


def sig_pnl_features(batch: PathBatch, order: int, embedding: EmbeddingSpec) -> np.ndarray:
    """Rows sum_t Sig(psi(X)_{0..t}) (x) dX_t, flattened word-major."""
    n = len(batch)
    embs = [embed(p, embedding, batch.signal(k)).values for k, p in enumerate(batch.paths)]
    c = embs[0].shape[1]
    if sig_dim(c, order) > MAX_SIG_WORDS:
        raise ValueError(f"signature feature blow-up: {sig_dim(c, order)} words exceed {MAX_SIG_WORDS}")
    d = batch.dim
    out = np.zeros((n, sig_dim(c, order), d))
    lens = np.array([p.n_steps for p in batch.paths])
    for length in np.unique(lens):
        idx = np.nonzero(lens == length)[0]
        s = batch_signature_prefixes(np.stack([embs[i] for i in idx]), order)
        inc = np.stack([increments(batch[i]) for i in idx])
        out[idx] = np.einsum("ntp,ntd->npd", s[:, :-1], inc)
    return out.reshape(n, -1)


def fit_sig_trader(batch: PathBatch, order: int, lam: float, eta: float,
                   embedding: EmbeddingSpec | None = None) -> SigTraderModel:
    """ell = (lam I + eta Sigma)^+ mu over terminal-PnL signature features."""
    if order < 0:
        raise ValueError("order must be nonnegative")
    if lam < 0 or eta < 0:
        raise ValueError("lambda and eta must be nonnegative")
    embedding = EmbeddingSpec() if embedding is None else embedding
    f = sig_pnl_features(batch, order, embedding)
    mu = f.mean(axis=0)
    fc = f - mu
    sigma = fc.T @ fc / len(batch)
    a = lam * np.eye(len(mu)) + eta * sigma
    ell = np.linalg.pinv(a, rcond=1e-12, hermitian=True) @ mu
    return SigTraderModel(order, ell.reshape(-1, batch.dim), embedding, float(lam), float(eta))


def markowitz_position(sigma, mu, eta: float) -> np.ndarray:
    """(1/eta) Sigma^-1 mu, falling back to the pseudo-inverse when singular."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    mu = np.asarray(mu, dtype=float)
    if not eta > 0:
        raise ValueError("eta must be positive")
    try:
        if np.linalg.cond(sigma) > 1e12:
            raise np.linalg.LinAlgError
        x = np.linalg.solve(sigma, mu.T).T
    except np.linalg.LinAlgError:
        x = (np.linalg.pinv(sigma) @ mu.T).T
    return x / eta


@dataclass(frozen=True, eq=False)
class MarkowitzStrategy:
    """Myopic (1/eta) Sigma^-1 E_t[mu_t] with a caller-supplied drift estimate.

    ``drift(path, signal)`` returns an (L, d) array whose row t uses data up to t.
    """

    sigma: np.ndarray
    drift: Callable
    eta: float = 1.0

    def positions(self, path: Path, signal: Path | None = None) -> np.ndarray:
        return markowitz_position(self.sigma, self.drift(path, signal), self.eta)


def ou_drift(theta, mu) -> Callable:
    """E_t[dX_t/dt] = theta * (mu - X_t) for an OU asset."""
    theta = np.asarray(theta, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return lambda path, signal=None: theta * (mu - path.values[:-1])


def signal_drift(scale: float = 1.0, channel: int = 0) -> Callable:
    """Drift proportional to a signal channel known at t."""
    return lambda path, signal: scale * signal.values[: path.n_steps, channel:channel + 1]


class ConstantStrategy:
    def __init__(self, units):
        self.units = np.atleast_1d(np.asarray(units, dtype=float))

    def positions(self, path: Path, signal: Path | None = None) -> np.ndarray:
        return np.tile(self.units, (path.n_steps, 1))


# ---------------------------------------------------------------- backtest

@dataclass(frozen=True, eq=False)
class BacktestReport:
    pnl: np.ndarray
    mean: float
    variance: float
    objective: float
    eta: float
    turnover: np.ndarray
    positions: tuple | None = None

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["path", "pnl", "turnover"])
        for k, (v, t) in enumerate(zip(self.pnl, self.turnover)):
            w.writerow([k, repr(float(v)), repr(float(t))])
        return out.getvalue()

    def summary(self) -> dict:
        sd = math.sqrt(self.variance)
        return {"n_paths": int(len(self.pnl)), "mean": self.mean, "variance": self.variance,
                "objective": self.objective, "eta": self.eta,
                "J": self.mean / sd if sd > 0 else None,
                "mean_turnover": float(np.mean(self.turnover))}

    def to_json(self) -> str:
        return _jsonio.dumps(self.summary())


def _positions_of(strategy, path: Path, signal: Path | None) -> np.ndarray:
    fn = strategy.positions if hasattr(strategy, "positions") else strategy
    return np.asarray(fn(path, signal), dtype=float).reshape(path.n_steps, path.dim)


def backtest(strategy, batch: PathBatch, eta: float, keep_positions: bool = False) -> BacktestReport:
    """V_T = sum_t <xi_t, X_{t+1} - X_t> on every path of ``batch``."""
    pnl, turn, kept = [], [], []
    for k, path in enumerate(batch.paths):
        try:
            xi = _positions_of(strategy, path, batch.signal(k))
        except Exception as exc:
            raise type(exc)(f"path {k}: {exc}") from exc
        pnl.append(float(np.sum(xi * increments(path))))
        turn.append(float(np.abs(np.diff(xi, axis=0, prepend=0.0)).sum()))
        if keep_positions:
            kept.append(xi)
    pnl = np.asarray(pnl)
    mean = float(pnl.mean())
    var = float(np.mean((pnl - mean) ** 2))
    return BacktestReport(pnl, mean, var, mean - 0.5 * eta * var, float(eta), np.asarray(turn),
                          tuple(kept) if keep_positions else None)


# ---------------------------------------------------------------- model files

def save(model: StrategyModel, include_eigvecs: bool = False) -> str:
    w = model.weights
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "embedding": model.embedding.to_dict(),
        "kernel": model.kernel.to_dict(),
        "lift": model.lift.A,
        "position_scale": float(model.position_scale),
        "weights": {"alpha": w.alpha, "eigvals": w.eigvals, "config": w.config.to_dict(),
                    "gram_fingerprint": w.gram_fingerprint},
        "colocation": model.colocation.to_dict(),
    }
    if include_eigvecs and w.eigvecs is not None:
        doc["weights"]["eigvecs"] = w.eigvecs
    return _jsonio.dumps(doc)


def load(document: str) -> StrategyModel:
    doc = _jsonio.loads(document, "model file")
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError("not a kernel-trading model file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    emb = EmbeddingSpec.from_dict(doc["embedding"])
    ker = KernelSpec.from_dict(doc["kernel"])
    lift = OperatorLift(np.asarray(doc["lift"], dtype=float))
    coloc = PathBatch.from_dict(doc["colocation"])
    wd = doc["weights"]
    vecs = wd.get("eigvecs")
    weights = FittedWeights(np.asarray(wd["alpha"], dtype=float), np.asarray(wd["eigvals"], dtype=float),
                            None if vecs is None else np.asarray(vecs, dtype=float),
                            FitConfig.from_dict(wd["config"]), wd["gram_fingerprint"])
    expected = spec_fingerprint(coloc, ker, emb, lift)
    if weights.gram_fingerprint.split(":")[0] != expected:
        raise ValueError("fingerprint mismatch between weights and co-location paths")
    return StrategyModel(emb, ker, lift, coloc, weights, float(doc["position_scale"]))
