"""Regularised mean-variance fit of the kernel strategy weights alpha."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .paths import EmbeddingSpec, PathBatch
from .pnlkernel import (GramMatrix, OperatorLift, _lift_for, kphi_cross, kphi_gram,
                        spec_fingerprint)
from .sigkernel import KernelSpec

PSD_WARN = 1e-5
PINV_RCOND = 1e-12
SCORE_COLUMNS = ["scale_gamma", "lambda", "m", "objective_train", "objective_val", "J", "R_contrib"]


@dataclass(frozen=True)
class FitConfig:
    lam: float
    eta: float = 1.0
    rank_m: int | str = "full"
    use_spectral: bool = True

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError("lambda must be positive")
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ValueError("eta must be nonnegative")
        if self.rank_m != "full" and (not isinstance(self.rank_m, (int, np.integer)) or self.rank_m < 1):
            raise ValueError("rank_m must be a positive integer or 'full'")

    def rank(self, n: int) -> int:
        if self.rank_m == "full":
            return n
        if self.rank_m > n:
            raise ValueError(f"rank_m={self.rank_m} exceeds N={n}")
        return int(self.rank_m)

    def to_dict(self) -> dict:
        m = self.rank_m if self.rank_m == "full" else int(self.rank_m)
        return {"lambda": float(self.lam), "eta": float(self.eta), "rank_m": m,
                "use_spectral": bool(self.use_spectral)}

    @classmethod
    def from_dict(cls, doc: dict) -> "FitConfig":
        extra = set(doc) - {"lambda", "eta", "rank_m", "use_spectral"}
        if extra:
            raise ValueError(f"unknown fit keys: {sorted(extra)}")
        return cls(lam=float(doc["lambda"]), eta=float(doc.get("eta", 1.0)),
                   rank_m=doc.get("rank_m", "full"), use_spectral=bool(doc.get("use_spectral", True)))


@dataclass(frozen=True, eq=False)
class FittedWeights:
    alpha: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray | None
    config: FitConfig
    gram_fingerprint: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.alpha)):
            raise ValueError("alpha has non-finite entries")


@dataclass(frozen=True, eq=False)
class MomentSummary:
    mu_phi: np.ndarray
    sigma_phi: np.ndarray


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Eigenpairs of K, eigenvalues descending."""

    values: np.ndarray
    vectors: np.ndarray


def _kmat(gram) -> np.ndarray:
    return gram.values if isinstance(gram, GramMatrix) else np.asarray(gram, dtype=float)


def _fp(gram) -> str:
    return gram.batch_fingerprint if isinstance(gram, GramMatrix) else ""


def spectrum(gram) -> Spectrum:
    """Eigenpairs of K in descending order, negative eigenvalues clipped to 0.

    Coarse PDE grids leave K slightly indefinite; the clip keeps every
    theta_k >= lam so the spectral system stays well posed.
    """
    k = _kmat(gram)
    ev, vec = np.linalg.eigh(0.5 * (k + k.T))
    order = np.argsort(ev)[::-1]
    ev, vec = ev[order], vec[:, order]
    top = max(float(ev[0]), 0.0) if ev.size else 0.0
    if ev.size and ev[-1] < -PSD_WARN * max(top, 1e-300):
        warnings.warn(f"Gram is indefinite beyond discretisation error (min eigenvalue {ev[-1]:.3g}, "
                      f"max {top:.3g}); consider a higher dyadic_order", stacklevel=2)
    return Spectrum(np.maximum(ev, 0.0), vec)


def covariance_operator(gram) -> np.ndarray:
    """(1/N)(I - 11^T/N) K; the centring acts on the left (see the decisions notes)."""
    k = _kmat(gram)
    n = k.shape[0]
    return (k - k.mean(axis=0, keepdims=True)) / n


def alpha_direct(gram, config: FitConfig) -> FittedWeights:
    """alpha = (lam I + (eta/N)(I - 11^T/N) K)^+ 1."""
    k = _kmat(gram)
    n = k.shape[0]
    a = config.lam * np.eye(n) + config.eta * covariance_operator(k)
    alpha = np.linalg.pinv(a, rcond=PINV_RCOND) @ np.ones(n)
    if not np.all(np.isfinite(alpha)):
        raise np.linalg.LinAlgError("ill-conditioned system; use spectral solver")
    return FittedWeights(alpha, np.empty(0), None, config, _fp(gram))


def alpha_spectral(gram, config: FitConfig, spec: Spectrum | None = None) -> FittedWeights:
    """Rank-m spectral weights built from the eigenpairs of K.

    With theta_k = lam + (eta/N) eig_k(K) and p_k = u_k^T 1/sqrt(N),
    alpha = (sqrt(N)/lam) (sum p_k^2/theta_k)^-1 sum (p_k/theta_k) u_k.
    """
    k = _kmat(gram)
    n = k.shape[0]
    spec = spectrum(k) if spec is None else spec
    m = config.rank(n)
    theta = config.lam + (config.eta / n) * spec.values[:m]
    u = spec.vectors[:, :m]
    p = u.sum(axis=0) / np.sqrt(n)
    if np.all(np.abs(p) < 1e-14):
        raise np.linalg.LinAlgError("e_N orthogonal to retained eigenspace")
    w = p / theta
    alpha = (np.sqrt(n) / config.lam) * (u @ w) / float(p @ w)
    return FittedWeights(alpha, theta, u, config, _fp(gram))


def fit_alpha(gram, config: FitConfig, spec: Spectrum | None = None) -> FittedWeights:
    if config.use_spectral:
        return alpha_spectral(gram, config, spec)
    return alpha_direct(gram, config)


def moments(gram) -> MomentSummary:
    """mu = K1/N^2, Sigma = K (I - 11^T/N) K / N^3."""
    k = _kmat(gram)
    n = k.shape[0]
    kc = k - k.mean(axis=1, keepdims=True)
    sigma = kc @ kc.T / n ** 3
    return MomentSummary(k.sum(axis=1) / n ** 2, 0.5 * (sigma + sigma.T))


def pnl_vector(alpha, cross_gram) -> np.ndarray:
    """Terminal PnL (1/N) sum_i alpha_i K_Phi(Y_i, X_j) of each evaluation path j."""
    c = np.asarray(cross_gram, dtype=float)
    c = c.reshape(len(alpha), -1)
    return np.asarray(alpha, dtype=float) @ c / c.shape[0]


def expected_pnl(alpha, cross_gram) -> float:
    return float(pnl_vector(alpha, cross_gram).mean())


def pnl_variance(alpha, cross_gram) -> float:
    v = pnl_vector(alpha, cross_gram)
    return float(np.mean((v - v.mean()) ** 2))


def penalised_objective(alpha, cross_gram, eta: float) -> float:
    v = pnl_vector(alpha, cross_gram)
    return float(v.mean() - 0.5 * eta * np.mean((v - v.mean()) ** 2))


def objective_ratio(alpha, moms: MomentSummary) -> float:
    """J = alpha^T mu / sqrt(alpha^T Sigma alpha)."""
    alpha = np.asarray(alpha, dtype=float)
    var = float(alpha @ moms.sigma_phi @ alpha)
    if not var > 0:
        raise ZeroDivisionError("objective ratio undefined at zero variance")
    return float(alpha @ moms.mu_phi) / math.sqrt(var)


def stability_metric(lambdas, j_values) -> float:
    """R = sqrt(sum ((J_{i+1} - J_i) / (log lam_{i+1} - log lam_i))^2)."""
    lam = np.asarray(lambdas, dtype=float)
    j = np.asarray(j_values, dtype=float)
    if lam.shape != j.shape or lam.size < 2:
        raise ValueError("need matching lambda and J sequences with at least 2 points")
    if np.any(np.diff(lam) == 0):
        raise ValueError("duplicate lambda values")
    if np.any(np.diff(lam) < 0):
        raise ValueError("lambda grid must be ascending")
    q = np.diff(j) / np.diff(np.log(lam))
    return float(np.sqrt(np.sum(q ** 2)))


def _insample_variance(spec: Spectrum, k: np.ndarray, lam: float, eta: float) -> float:
    a = alpha_spectral(k, FitConfig(lam, eta), spec).alpha
    return pnl_variance(a, k)


def variance_curve(gram, lam: float, etas) -> np.ndarray:
    k = _kmat(gram)
    spec = spectrum(k)
    return np.array([_insample_variance(spec, k, lam, float(e)) for e in etas])


def calibrate_eta(gram, lam: float, target_delta: float,
                  bracket: tuple[float, float] = (1e-6, 1e12), rtol: float = 1e-3) -> float:
    """Risk aversion whose fitted in-sample PnL variance equals target_delta.

    Bisects on log(eta); the variance must fall as eta grows, which is
    checked on every evaluated point.
    """
    if not target_delta > 0:
        raise ValueError("target variance must be positive")
    k = _kmat(gram)
    spec = spectrum(k)
    seen: list[tuple[float, float]] = []

    def var_at(log_eta: float) -> float:
        v = _insample_variance(spec, k, lam, math.exp(log_eta))
        seen.append((log_eta, v))
        seen.sort()
        vs = np.array([s[1] for s in seen])
        if np.any(np.diff(vs) > 1e-9 * max(vs.max(), 1e-300)):
            raise RuntimeError("in-sample variance is not monotone in eta")
        return v

    lo, hi = math.log(bracket[0]), math.log(bracket[1])
    v_lo, v_hi = var_at(lo), var_at(hi)
    if not v_hi <= target_delta <= v_lo:
        raise ValueError(f"target variance {target_delta:.6g} unreachable; "
                         f"achievable range [{v_hi:.6g}, {v_lo:.6g}]")
    for _ in range(200):
        if abs(v_lo - target_delta) <= 0.1 * rtol * target_delta:
            return math.exp(lo)
        if abs(v_hi - target_delta) <= 0.1 * rtol * target_delta:
            return math.exp(hi)
        mid = 0.5 * (lo + hi)
        v = var_at(mid)
        if v > target_delta:
            lo, v_lo = mid, v
        else:
            hi, v_hi = mid, v
    best_lo = abs(v_lo - target_delta) <= abs(v_hi - target_delta)
    return math.exp(lo if best_lo else hi)


# ---------------------------------------------------------------- grid search

@dataclass
class GridSearchResult:
    scale_gamma: float
    lam: float
    m: int | str
    weights: FittedWeights
    embedding: EmbeddingSpec
    train_batch: PathBatch
    gram: GramMatrix
    table: list = field(default_factory=list)
    score: float = float("nan")


def split_indices(n: int, val_fraction: float = 0.25, seed: int = 0):
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    if n_val >= n:
        raise ValueError("validation split leaves no training paths")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def kfold_indices(n: int, folds: int, seed: int = 0):
    if not 2 <= folds <= n:
        raise ValueError("folds must lie in 2..N")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    return [(np.sort(np.concatenate(parts[:f] + parts[f + 1:])), np.sort(parts[f]))
            for f in range(folds)]


def _dedupe(values, what: str) -> list:
    out = []
    for v in values:
        if v not in out:
            out.append(v)
    if len(out) < len(list(values)):
        warnings.warn(f"duplicate {what} values removed from grid", stacklevel=3)
    return out


def _rank_grid(m_grid, n: int) -> list:
    out = []
    for m in m_grid:
        m = "full" if m == "full" or m >= n else int(m)
        if m not in out:
            out.append(m)
    return out


def _score_cells(k_all, tr, va, lams, m_grid, eta):
    """Train/validation objectives and validation J for every (lam, m)."""
    k = k_all[np.ix_(tr, tr)]
    c = k_all[np.ix_(tr, va)]
    spec = spectrum(k)
    out = {}
    for m in _rank_grid(m_grid, len(tr)):
        for lam in lams:
            try:
                a = alpha_spectral(k, FitConfig(lam, eta, m), spec).alpha
                v_tr = pnl_vector(a, k)
                v_va = pnl_vector(a, c)
                ob_tr = v_tr.mean() - 0.5 * eta * v_tr.var()
                ob_va = v_va.mean() - 0.5 * eta * v_va.var()
                sd = v_va.std()
                j = v_va.mean() / sd if sd > 0 else float("nan")
                out[(lam, m)] = (ob_tr, ob_va, j, "")
            except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
                out[(lam, m)] = (float("nan"), float("nan"), float("nan"), str(exc))
    return out


def grid_search(batch: PathBatch, kspec: KernelSpec, espec: EmbeddingSpec,
                lift: OperatorLift | None, scale_grid, lam_grid, m_grid, eta: float,
                val_batch: PathBatch | None = None, val_fraction: float = 0.25,
                folds: int | None = None, seed: int = 0) -> GridSearchResult:
    """Hyper-parameter search over (scale_gamma, lambda, m), scored by
    E - (eta/2) Var on held-out paths.

    With ``val_batch`` the whole ``batch`` trains; otherwise a seeded split
    (or ``folds``-fold rotation) of ``batch`` is used. The Gram of every path
    involved is built once per scale_gamma and sliced per fold. Ties go to the
    larger lambda, then the smaller m. Returned weights are fitted on the
    training paths (single split) or on all of ``batch`` (k-fold).
    """
    scales = _dedupe([float(s) for s in scale_grid], "scale_gamma")
    lams = sorted(_dedupe([float(v) for v in lam_grid], "lambda"))
    ms = _dedupe(list(m_grid), "rank")
    if not (scales and lams and ms):
        raise ValueError("grids must be nonempty")
    lift = _lift_for(lift, batch.dim)
    n = len(batch)
    if val_batch is not None:
        pool = PathBatch(batch.paths + val_batch.paths, batch.label,
                         None if batch.signals is None else batch.signals + val_batch.signals)
        splits = [(np.arange(n), np.arange(n, n + len(val_batch)))]
    elif folds:
        pool = batch
        splits = kfold_indices(n, int(folds), seed)
    else:
        pool = batch
        splits = [split_indices(n, val_fraction, seed)]

    table, grams = [], {}
    for s in scales:
        es = espec.replace(scale_gamma=s)
        try:
            k_all = kphi_gram(kspec, es, lift, pool).values
        except FloatingPointError as exc:
            warnings.warn(f"scale_gamma={s}: {exc}", stacklevel=2)
            for m in _rank_grid(ms, len(splits[0][0])):
                table.extend({"scale_gamma": s, "lambda": lam, "m": m, "objective_train": float("nan"),
                              "objective_val": float("nan"), "J": float("nan"), "R_contrib": float("nan"),
                              "error": str(exc)} for lam in lams)
            continue
        grams[s] = k_all
        cells = [_score_cells(k_all, tr, va, lams, ms, eta) for tr, va in splits]
        for m in _rank_grid(ms, len(splits[0][0])):
            rows = []
            for lam in lams:
                vals = np.array([c[(lam, m)][:3] for c in cells], dtype=float)
                errs = "; ".join(c[(lam, m)][3] for c in cells if c[(lam, m)][3])
                ob_tr, ob_va, j = vals.mean(axis=0)
                rows.append({"scale_gamma": s, "lambda": lam, "m": m, "objective_train": ob_tr,
                             "objective_val": ob_va, "J": j, "error": errs})
            for i, row in enumerate(rows):
                if i + 1 < len(rows):
                    dq = (rows[i + 1]["J"] - row["J"]) / (math.log(rows[i + 1]["lambda"]) - math.log(row["lambda"]))
                    row["R_contrib"] = dq * dq
                else:
                    row["R_contrib"] = 0.0
            table.extend(rows)

    ok = [r for r in table if np.isfinite(r["objective_val"])]
    if not ok:
        diag = "; ".join(f"(scale={r['scale_gamma']}, lambda={r['lambda']}, m={r['m']}): {r['error']}"
                         for r in table)
        raise RuntimeError(f"all grid cells failed: {diag}")

    def key(r):
        m = len(batch) if r["m"] == "full" else r["m"]
        return (r["objective_val"], r["lambda"], -m)

    best = max(ok, key=key)
    s, lam, m = best["scale_gamma"], best["lambda"], best["m"]
    es = espec.replace(scale_gamma=s)
    tr = np.arange(n) if (val_batch is not None or folds) else splits[0][0]
    train = batch.subset(tr)
    k_tr = grams[s][np.ix_(tr, tr)]
    gram = GramMatrix(k_tr, spec_fingerprint(train, kspec, es, lift))
    weights = alpha_spectral(gram, FitConfig(lam, eta, m if m == "full" or m < len(tr) else "full"))
    return GridSearchResult(s, lam, m, weights, es, train, gram, table, best["objective_val"])


def write_score_table(rows, stream=None) -> str:
    out = io.StringIO() if stream is None else stream
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for r in rows:
        w.writerow([_num(r[c]) if c != "m" else r[c] for c in SCORE_COLUMNS])
    return out.getvalue() if stream is None else ""


def _num(x) -> str:
    x = float(x)
    return repr(x) if math.isfinite(x) else "nan"
