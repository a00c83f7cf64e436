"""Synthetic worlds: OU assets, power-law path-dependent drift, forecast signals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .paths import Path, PathBatch, increments

DECAY_KINDS = ("flat", "power_law", "exponential")
VOL_PROXIES = ("window_rms", "abs_return")


# per-generator stream tags: equal seeds in different generators must not share draws
_STREAM = {"ou": 1, "drift": 2, "signal": 3, "sv": 4}


def _rng(seed: int, k: int, stream: str) -> np.random.Generator:
    """Independent stream for path k of a seeded batch of one generator."""
    return np.random.default_rng([int(seed), int(k), _STREAM[stream]])


def _grid(n_steps: int, dt: float) -> np.ndarray:
    return np.arange(n_steps + 1) * dt


def _vec(x, d: int, name: str) -> np.ndarray:
    v = np.broadcast_to(np.asarray(x, dtype=float), (d,)).copy()
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


# ---------------------------------------------------------------- OU

@dataclass(frozen=True, eq=False)
class OUParams:
    theta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    corr: np.ndarray | None = None
    x0: np.ndarray | None = None

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.theta)).shape[0]
        object.__setattr__(self, "theta", _vec(self.theta, d, "theta"))
        object.__setattr__(self, "mu", _vec(self.mu, d, "mu"))
        object.__setattr__(self, "sigma", _vec(self.sigma, d, "sigma"))
        x0 = self.mu if self.x0 is None else self.x0
        object.__setattr__(self, "x0", _vec(x0, d, "x0"))
        corr = np.eye(d) if self.corr is None else np.array(self.corr, dtype=float)
        object.__setattr__(self, "corr", corr)
        if np.any(self.theta < 0):
            raise ValueError("theta must be nonnegative")
        if corr.shape != (d, d):
            raise ValueError("corr must be d x d")

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def to_dict(self) -> dict:
        return {"theta": self.theta, "mu": self.mu, "sigma": self.sigma, "corr": self.corr, "x0": self.x0}

    @classmethod
    def from_dict(cls, doc: dict) -> "OUParams":
        extra = set(doc) - {"theta", "mu", "sigma", "corr", "x0"}
        if extra:
            raise ValueError(f"unknown OU keys: {sorted(extra)}")
        return cls(**doc)


def _corr_factor(corr: np.ndarray) -> np.ndarray:
    """Square-root factor L with L L^T = corr; tolerates singular corr."""
    if np.max(np.abs(corr - corr.T)) > 1e-12 or np.max(np.abs(np.diag(corr) - 1)) > 1e-12:
        raise ValueError("corr must be symmetric with unit diagonal")
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        ev, vec = np.linalg.eigh(corr)
        if ev.min() < -1e-10:
            raise ValueError("corr is not positive semidefinite") from None
        return vec * np.sqrt(np.clip(ev, 0.0, None))


def gen_ou(params: OUParams, n_paths: int, n_steps: int, dt: float, seed: int = 0,
           label: str = "ou") -> PathBatch:
    """Exact OU transitions X' = mu + (X - mu) e^{-theta dt} + s eps, eps ~ N(0, corr)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    fac = _corr_factor(params.corr)
    th, mu, sg = params.theta, params.mu, params.sigma
    decay = np.exp(-th * dt)
    with np.errstate(divide="ignore", invalid="ignore"):
        sd = np.where(th > 0, sg * np.sqrt((1 - np.exp(-2 * th * dt)) / (2 * th)), sg * math.sqrt(dt))
    times = _grid(n_steps, dt)
    paths = []
    for k in range(n_paths):
        eps = _rng(seed, k, "ou").standard_normal((n_steps, params.dim)) @ fac.T
        x = np.empty((n_steps + 1, params.dim))
        x[0] = params.x0
        for t in range(n_steps):
            x[t + 1] = mu + (x[t] - mu) * decay + sd * eps[t]
        paths.append(Path(times, x))
    return PathBatch(tuple(paths), label)


# ---------------------------------------------------------------- drift model

@dataclass(frozen=True)
class DriftModelParams:
    kappa: float = 5.0
    sigma_I: float = 1.0
    sigma_X: float = 0.2
    decay_alpha: float = 1.0
    decay_c: float = 0.05
    rho: float = 0.1

    def __post_init__(self):
        if not self.decay_c > 0:
            raise ValueError("decay_c must be positive")
        if not self.decay_alpha > 0:
            raise ValueError("decay_alpha must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be below 1")
        if self.kappa < 0 or self.sigma_I < 0 or self.sigma_X < 0:
            raise ValueError("kappa and volatilities must be nonnegative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class DriftSample(tuple):
    """(X, I, mu) batches; ``gain`` holds the calibrated drift amplitude."""

    def __new__(cls, x, i, mu, gain):
        obj = super().__new__(cls, (x, i, mu))
        obj.gain = gain
        return obj


def drift_gain(sigma_x: float, sigma_mu: float, rho: float) -> float:
    """(sigma_X / sigma_mu) rho / sqrt(1 - rho^2)."""
    if not abs(rho) < 1:
        raise ValueError("|rho| must be below 1")
    if not sigma_mu > 0:
        raise ValueError("sigma_mu must be positive")
    return (sigma_x / sigma_mu) * rho / math.sqrt(1 - rho * rho)


def power_kernel(u, c: float, alpha: float):
    return 1.0 / (c + np.asarray(u, dtype=float)) ** alpha


def convolution_matrix(n_steps: int, dt: float, c: float, alpha: float) -> np.ndarray:
    """T[k, j] = G(t_k - t_j) dt for j < k, zero otherwise."""
    lag = np.subtract.outer(np.arange(n_steps + 1), np.arange(n_steps + 1))
    out = np.where(lag > 0, power_kernel(np.maximum(lag, 1) * dt, c, alpha) * dt, 0.0)
    return out


def gen_pathdep_drift(params: DriftModelParams, n_paths: int, n_steps: int, dt: float,
                      seed: int = 0) -> DriftSample:
    """Asset with drift mu_t = gain * sum_{s<t} G(t-s) I_s dt driven by an OU factor I.

    The gain is set so that corr(mu_t dt, dX_t) = rho per step, using the
    pooled standard deviation of the drift before scaling (pilot pass over
    the same I draws).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    p = params
    times = _grid(n_steps, dt)
    if p.kappa > 0:
        dec = math.exp(-p.kappa * dt)
        sd_i = p.sigma_I * math.sqrt((1 - dec * dec) / (2 * p.kappa))
        sd_0 = p.sigma_I / math.sqrt(2 * p.kappa)
    else:
        dec, sd_i, sd_0 = 1.0, p.sigma_I * math.sqrt(dt), 0.0
    i_vals = np.empty((n_paths, n_steps + 1))
    noise_x = np.empty((n_paths, n_steps))
    for k in range(n_paths):
        rng = _rng(seed, k, "drift")
        i0 = sd_0 * rng.standard_normal()
        ei = rng.standard_normal(n_steps)
        noise_x[k] = rng.standard_normal(n_steps)
        row = i_vals[k]
        row[0] = i0
        for t in range(n_steps):
            row[t + 1] = row[t] * dec + sd_i * ei[t]
    conv = convolution_matrix(n_steps, dt, p.decay_c, p.decay_alpha)
    pre = i_vals @ conv.T
    if p.rho == 0:
        gain = 0.0
    else:
        s_mu = float(pre[:, 1:n_steps].std()) if n_steps > 1 else 0.0
        gain = drift_gain(p.sigma_X * math.sqrt(dt), s_mu * dt, p.rho) if s_mu > 0 else 0.0
    mu = gain * pre
    x = np.zeros((n_paths, n_steps + 1))
    x[:, 1:] = np.cumsum(mu[:, :-1] * dt + p.sigma_X * math.sqrt(dt) * noise_x, axis=1)
    mk = lambda arr, lab: PathBatch(tuple(Path(times, r[:, None]) for r in arr), lab)
    return DriftSample(mk(x, "X"), mk(i_vals, "I"), mk(mu, "mu"), gain)


# ---------------------------------------------------------------- signals

@dataclass(frozen=True)
class SignalParams:
    horizon_w: int = 3
    rho: float = 0.07
    sv_gamma: float = 0.5
    decay: dict = field(default_factory=lambda: {"kind": "flat"})
    vol_proxy: str = "window_rms"
    seed: int = 0

    def __post_init__(self):
        if int(self.horizon_w) < 1:
            raise ValueError("horizon_w must be at least 1")
        if not 0 <= self.sv_gamma <= 1:
            raise ValueError("sv_gamma must lie in [0, 1]")
        if not -1 <= self.rho <= 1:
            raise ValueError("rho must lie in [-1, 1]")
        if self.vol_proxy not in VOL_PROXIES:
            raise ValueError(f"vol_proxy must be one of {VOL_PROXIES}")
        kind = self.decay.get("kind")
        if kind not in DECAY_KINDS:
            raise ValueError(f"decay kind must be one of {DECAY_KINDS}")

    def to_dict(self) -> dict:
        return {"horizon_w": int(self.horizon_w), "rho": float(self.rho), "sv_gamma": float(self.sv_gamma),
                "decay": dict(self.decay), "vol_proxy": self.vol_proxy, "seed": int(self.seed)}


@dataclass(frozen=True)
class SignalStats:
    """Normalisers estimated on the generating sample; reuse them for test data."""

    sigma_y: float
    sigma_eta: float
    sigma_z: float
    rho_y_eta: float
    mu_v: float


def decay_weights(decay: dict, w: int) -> np.ndarray:
    """K(w - s) for s = 0..w-1 (lags measured in steps)."""
    u = w - np.arange(w, dtype=float)
    kind = decay.get("kind")
    if kind == "flat":
        return np.ones(w)
    if kind == "power_law":
        return 1.0 / (float(decay.get("c", 1.0)) + u) ** float(decay.get("alpha", 1.0))
    if kind == "exponential":
        return np.exp(-float(decay.get("rate", 1.0)) * u)
    raise ValueError(f"unknown decay kind {kind!r}")


def vol_proxy(returns, mode: str = "window_rms", window: int = 1, dt: float = 1.0) -> np.ndarray:
    """Volatility proxy per step.

    window_rms: sqrt((1/w) sum r^2) over the window starting at each step
    (shorter at the end of the series); abs_return: |r| / dt.
    """
    r = np.asarray(returns, dtype=float).reshape(-1)
    if mode == "abs_return":
        return np.abs(r) / dt
    if mode != "window_rms":
        raise ValueError(f"unknown vol proxy {mode!r}")
    if not 1 <= window <= max(len(r), 1):
        raise ValueError("window must lie in 1..len(returns)")
    csum = np.concatenate([[0.0], np.cumsum(r * r)])
    ends = np.minimum(np.arange(len(r)) + window, len(r))
    cnt = ends - np.arange(len(r))
    return np.sqrt(np.maximum(csum[ends] - csum[:-1], 0.0) / cnt)


def _window_sums(a: np.ndarray, w: int) -> np.ndarray:
    c = np.concatenate([[0.0], np.cumsum(a)])
    return c[w:] - c[:-w]


def _signal_parts(path: Path, params: SignalParams, k: int):
    w = int(params.horizon_w)
    r = increments(path)[:, 0]
    if len(r) < w:
        raise ValueError("path shorter than the forecast horizon")
    dt = float(np.mean(np.diff(path.times)))
    y = _window_sums(r, w)
    kern = decay_weights(params.decay, w)
    eta = np.array([kern @ r[t:t + w] for t in range(len(r) - w + 1)])
    rng = _rng(params.seed, k, "signal")
    dw_sv = rng.standard_normal(len(r)) * math.sqrt(dt)
    dw_add = rng.standard_normal(len(r)) * math.sqrt(dt)
    if params.vol_proxy == "window_rms":
        sig = vol_proxy(r, "window_rms", w)[: len(y)]
        sv = sig * _window_sums(dw_sv, w)
    else:
        sig = vol_proxy(r, "abs_return", dt=dt)
        sv = _window_sums(sig * dw_sv, w)
    return y, eta, sv, _window_sums(dw_add, w), sig


def gen_signal_batch(batch: PathBatch, params: SignalParams,
                     stats: SignalStats | None = None) -> tuple[PathBatch, SignalStats]:
    """Forecasts yhat_{t,w} of X_{t+w} - X_t for every path (channel 0).

    yhat = rho sigma_y ((rho/rho_yeta) eta/sigma_eta + sqrt(1 - rho^2/rho_yeta^2) z/sigma_z)
    with z = sqrt(g/mu_V) int sigma dW_sv + sqrt(1-g) dW_add. The last w
    samples of each path carry no forecast and are dropped.
    """
    parts = [_signal_parts(p, params, k) for k, p in enumerate(batch.paths)]
    g = float(params.sv_gamma)
    if stats is None:
        mu_v = float(np.mean(np.concatenate([s[4] ** 2 for s in parts])))
    else:
        mu_v = stats.mu_v
    sv_w = math.sqrt(g / mu_v) if g > 0 and mu_v > 0 else 0.0
    zs = [sv_w * sv + math.sqrt(1 - g) * add for (_, _, sv, add, _) in parts]
    if stats is None:
        y_all = np.concatenate([s[0] for s in parts])
        e_all = np.concatenate([s[1] for s in parts])
        z_all = np.concatenate(zs)
        sd_e = float(e_all.std())
        rho_ye = float(np.corrcoef(y_all, e_all)[0, 1]) if sd_e > 0 else 0.0
        stats = SignalStats(float(y_all.std()), sd_e, float(z_all.std()), rho_ye, mu_v)
    rho = float(params.rho)
    if stats.rho_y_eta < abs(rho) - 1e-12:
        raise ValueError("target correlation unreachable with this decay")
    b1 = rho / stats.rho_y_eta if stats.rho_y_eta > 0 else 0.0
    b2 = math.sqrt(max(0.0, 1 - b1 * b1))
    out = []
    for (y, eta, _, _, _), z, p in zip(parts, zs, batch.paths):
        noise = z / stats.sigma_z if b2 > 0 and stats.sigma_z > 0 else 0.0 * z
        yhat = rho * stats.sigma_y * (b1 * eta / stats.sigma_eta + b2 * noise)
        out.append(Path(p.times[: len(yhat)], yhat[:, None]))
    return PathBatch(tuple(out), "signal"), stats


def gen_signal(asset: Path, params: SignalParams, stats: SignalStats | None = None) -> Path:
    return gen_signal_batch(PathBatch((asset,)), params, stats)[0][0]


# ---------------------------------------------------------------- bar fixture

def gen_sv_sessions(n_sessions: int, bars: int = 78, seed: int = 0, p0: float = 100.0,
                    base_vol: float = 0.001, vol_of_vol: float = 0.1,
                    vol_reversion: float = 0.05) -> PathBatch:
    """Intraday price paths with log-normal stochastic volatility, one per session."""
    out = []
    stat_sd = vol_of_vol / math.sqrt(max(1 - (1 - vol_reversion) ** 2, 1e-12))
    for k in range(n_sessions):
        rng = _rng(seed, k, "sv")
        h = np.empty(bars - 1)
        h_prev = stat_sd * rng.standard_normal()
        for t in range(bars - 1):
            h_prev = (1 - vol_reversion) * h_prev + vol_of_vol * rng.standard_normal()
            h[t] = h_prev
        r = base_vol * np.exp(h - 0.5 * stat_sd ** 2) * rng.standard_normal(bars - 1)
        prices = p0 * np.exp(np.concatenate([[0.0], np.cumsum(r)]))
        out.append(Path(np.linspace(0.0, 1.0, bars), prices[:, None]))
    return PathBatch(tuple(out), "sv_sessions")
