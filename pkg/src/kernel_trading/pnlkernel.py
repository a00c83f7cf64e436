"""PnL feature-map kernel K_Phi: pairwise values, Gram matrices, the Gamma map
and the Nystrom approximation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import _jsonio
from .paths import EmbeddingSpec, Path, PathBatch, batch_fingerprint, embed, increments
from .sigkernel import DIVERGENCE_MSG, KernelSpec, _pde_grid, batch_prefix_features


@dataclass(frozen=True, eq=False)
class OperatorLift:
    """Matrix A in K(X, Y) = kappa(X, Y) A."""

    A: np.ndarray

    def __post_init__(self):
        a = np.array(self.A, dtype=float, copy=True)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("lift must be a square matrix")
        if not np.all(np.isfinite(a)):
            raise ValueError("lift has non-finite entries")
        if np.max(np.abs(a - a.T), initial=0.0) > 1e-12:
            raise ValueError("lift must be symmetric")
        if np.linalg.eigvalsh(a).min() < -1e-10:
            raise ValueError("lift must be positive semidefinite")
        a.setflags(write=False)
        object.__setattr__(self, "A", a)

    @classmethod
    def identity(cls, d: int) -> "OperatorLift":
        return cls(np.eye(d))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def to_list(self) -> list:
        return self.A.tolist()


def _lift_for(lift: OperatorLift | None, d: int) -> OperatorLift:
    lift = OperatorLift.identity(d) if lift is None else lift
    if lift.dim != d:
        raise ValueError(f"lift is {lift.dim}x{lift.dim} but paths have {d} channels")
    return lift


def spec_fingerprint(batch: PathBatch, kspec: KernelSpec, espec: EmbeddingSpec,
                     lift: OperatorLift) -> str:
    """Hash of the batch content together with every spec that shapes K_Phi."""
    h = hashlib.sha256()
    h.update(batch_fingerprint(batch).encode())
    h.update(json.dumps(kspec.to_dict(), sort_keys=True).encode())
    h.update(_jsonio.dumps(espec.to_dict(), indent=None).encode())
    h.update(np.ascontiguousarray(lift.A, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class GramMatrix:
    values: np.ndarray
    batch_fingerprint: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("Gram matrix must be square")
        if not np.all(np.isfinite(v)):
            raise ValueError("Gram matrix has non-finite entries")
        if v.size and np.max(np.abs(v - v.T)) > 1e-10 * max(1.0, np.max(np.abs(v))):
            raise ValueError("Gram matrix is not symmetric")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def to_json(self) -> str:
        return _jsonio.dumps({"format": "kphi-gram", "version": 1, "n": self.n,
                              "batch_fingerprint": self.batch_fingerprint,
                              "values": self.values.ravel()})

    @classmethod
    def from_json(cls, text: str) -> "GramMatrix":
        doc = _jsonio.loads(text, "Gram document")
        if doc.get("format") != "kphi-gram" or doc.get("version") != 1:
            raise ValueError("not a version-1 Gram document")
        n = int(doc["n"])
        return cls(np.asarray(doc["values"], dtype=float).reshape(n, n), doc["batch_fingerprint"])


@dataclass(frozen=True, eq=False)
class GammaMatrix:
    values: np.ndarray
    prefix_index: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Gamma matrix has non-finite entries")


# ---------------------------------------------------------------- packing

@dataclass
class _Packed:
    emb: np.ndarray      # (n, Lmax+1, c) embedded values, zero padded
    inc: np.ndarray      # (n, Lmax, d) raw asset increments
    lens: np.ndarray     # (n,) increment counts


def _pack(paths, signals, espec: EmbeddingSpec) -> _Packed:
    embs = [embed(p, espec, None if signals is None else signals[k]).values
            for k, p in enumerate(paths)]
    lens = np.array([p.n_steps for p in paths], dtype=np.int64)
    lmax = int(lens.max()) if len(lens) else 0
    c = embs[0].shape[1]
    d = paths[0].dim
    emb = np.zeros((len(paths), lmax + 1, c))
    inc = np.zeros((len(paths), lmax, d))
    for k, (p, e) in enumerate(zip(paths, embs)):
        emb[k, : len(e)] = e
        inc[k, : p.n_steps] = increments(p)
    return _Packed(emb, inc, lens)


def _pack_batch(batch: PathBatch, espec: EmbeddingSpec) -> _Packed:
    if len(batch) == 0:
        raise ValueError("empty batch")
    return _pack(batch.paths, batch.signals, espec)


def _pack_path(path: Path, espec: EmbeddingSpec, signal: Path | None) -> _Packed:
    return _pack([path], None if signal is None else [signal], espec)


def _features(kspec: KernelSpec, pk: _Packed) -> np.ndarray:
    """Per-prefix features (n, Lmax+1, p); rows past a path's end are unused."""
    out = None
    for length in np.unique(pk.lens):
        idx = np.nonzero(pk.lens == length)[0]
        f = batch_prefix_features(kspec, pk.emb[idx, : length + 1])
        if out is None:
            out = np.zeros((len(pk.lens), pk.emb.shape[1], f.shape[2]))
        out[idx, : length + 1] = f
    return out


def _pnl_features(feat: np.ndarray, inc: np.ndarray, lens: np.ndarray) -> np.ndarray:
    """Phi_X = sum_t F_t (x) dX_t, shape (n, p, d). Padded increments are zero."""
    lmax = inc.shape[1]
    return np.einsum("ntp,ntd->npd", feat[:, :lmax], inc)


# ---------------------------------------------------------------- numba cores

@njit(cache=True)
def _contract(u, ix, iya, lx, ly):
    s = 0.0
    for a in range(lx):
        for b in range(ly):
            g = 0.0
            for m in range(ix.shape[1]):
                g += ix[a, m] * iya[b, m]
            s += u[a, b] * g
    return s


@njit(parallel=True, cache=True)
def _pde_block(ex, ix, lx, ey, iya, ly, dyadic_order, symmetric):
    n = ex.shape[0]
    m = ey.shape[0]
    out = np.zeros((n, m))
    for i in prange(n):
        j0 = i if symmetric else 0
        for j in range(j0, m):
            u = _pde_grid(ex[i, : lx[i] + 1], ey[j, : ly[j] + 1], dyadic_order)
            out[i, j] = _contract(u, ix[i], iya[j], lx[i], ly[j])
    if symmetric:
        for i in range(n):
            for j in range(i):
                out[i, j] = out[j, i]
    return out


@njit(parallel=True, cache=True)
def _pde_gamma(elive, ey, iya, ly, dyadic_order):
    """(Llive+1, n, d) array: row t holds Gamma at the prefix ending at t."""
    n = ey.shape[0]
    d = iya.shape[2]
    out = np.zeros((elive.shape[0], n, d))
    for i in prange(n):
        u = _pde_grid(elive, ey[i, : ly[i] + 1], dyadic_order)
        for t in range(elive.shape[0]):
            for b in range(ly[i]):
                w = u[t, b]
                for k in range(d):
                    out[t, i, k] += w * iya[i, b, k]
    return out


def _raise_if_bad(values: np.ndarray, what: str) -> None:
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        raise FloatingPointError(f"{DIVERGENCE_MSG} ({what} entry {tuple(int(v) for v in bad[0])})")


def _block(kspec: KernelSpec, px: _Packed, py: _Packed, lift: OperatorLift,
           symmetric: bool) -> np.ndarray:
    if px.emb.shape[2] != py.emb.shape[2]:
        raise ValueError("embedded channel counts differ")
    iya = py.inc @ lift.A
    if kspec.variant == "sig_pde":
        out = _pde_block(px.emb, px.inc, px.lens, py.emb, iya, py.lens,
                         int(kspec.dyadic_order), symmetric)
        _raise_if_bad(out, "pair")
        return out
    phx = _pnl_features(_features(kspec, px), px.inc, px.lens)
    phy = _pnl_features(_features(kspec, py), iya, py.lens)
    out = np.einsum("npd,mpd->nm", phx, phy)
    if symmetric:
        out = np.triu(out) + np.triu(out, 1).T
    return out


# ---------------------------------------------------------------- public API

def kphi_pair(kspec: KernelSpec, espec: EmbeddingSpec, lift: OperatorLift | None,
              x: Path, y: Path, signal_x: Path | None = None,
              signal_y: Path | None = None) -> float:
    """sum_{i<Lx, j<Ly} kappa(psi(X)_{0..i}, psi(Y)_{0..j}) dX_i^T A dY_j."""
    if x.dim != y.dim:
        raise ValueError(f"channel mismatch: {x.dim} vs {y.dim}")
    lift = _lift_for(lift, x.dim)
    return float(_block(kspec, _pack_path(x, espec, signal_x), _pack_path(y, espec, signal_y),
                        lift, False)[0, 0])


def kphi_gram(kspec: KernelSpec, espec: EmbeddingSpec, lift: OperatorLift | None,
              batch: PathBatch) -> GramMatrix:
    lift = _lift_for(lift, batch.dim)
    pk = _pack_batch(batch, espec)
    vals = _block(kspec, pk, pk, lift, True)
    return GramMatrix(vals, spec_fingerprint(batch, kspec, espec, lift))


def kphi_cross(kspec: KernelSpec, espec: EmbeddingSpec, lift: OperatorLift | None,
               rows: PathBatch, cols: PathBatch) -> np.ndarray:
    """Matrix [K_Phi(rows_i, cols_j)] of shape (len(rows), len(cols))."""
    if rows.dim != cols.dim:
        raise ValueError("batches have different channel counts")
    lift = _lift_for(lift, rows.dim)
    return _block(kspec, _pack_batch(rows, espec), _pack_batch(cols, espec), lift, False)


def gamma_rows(kspec: KernelSpec, espec: EmbeddingSpec, lift: OperatorLift | None,
               live: Path, batch: PathBatch, signal: Path | None = None) -> np.ndarray:
    """Gamma at every prefix of ``live``: array (L+1, d, N).

    Row t depends on the samples 0..t of ``live`` only: it is read off row t of
    the prefix-kernel grid.
    """
    if live.dim != batch.dim:
        raise ValueError("live path and co-location batch have different channel counts")
    lift = _lift_for(lift, batch.dim)
    pl = _pack_path(live, espec, signal)
    py = _pack_batch(batch, espec)
    iya = py.inc @ lift.A
    if pl.emb.shape[2] != py.emb.shape[2]:
        raise ValueError("embedded channel counts differ")
    if kspec.variant == "sig_pde":
        g = _pde_gamma(pl.emb[0], py.emb, iya, py.lens, int(kspec.dyadic_order))
        _raise_if_bad(g, "gamma")
    else:
        fl = _features(kspec, pl)[0]                       # (L+1, p)
        psi = _pnl_features(_features(kspec, py), iya, py.lens)  # (N, p, d)
        g = np.einsum("tp,npd->tnd", fl, psi)
    return np.ascontiguousarray(np.transpose(g, (0, 2, 1)))


def gamma_map(kspec: KernelSpec, espec: EmbeddingSpec, lift: OperatorLift | None,
              live: Path, batch: PathBatch, signal: Path | None = None) -> GammaMatrix:
    """Gamma for the full prefix ``live`` (its last sample is the current time)."""
    g = gamma_rows(kspec, espec, lift, live, batch, signal)
    return GammaMatrix(g[-1], live.n_steps)


def random_landmarks(n_total: int, n: int, seed: int = 0) -> np.ndarray:
    """Uniformly random distinct indices, sorted."""
    if not 1 <= n <= n_total:
        raise ValueError("landmark count must lie in 1..N")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_total, size=n, replace=False))


def nystrom_gram(kspec: KernelSpec, espec: EmbeddingSpec, lift: OperatorLift | None,
                 batch: PathBatch, landmark_indices) -> GramMatrix:
    """C W^+ C^T with C = K_Phi(X, X_I); W is read from the landmark rows of C."""
    idx = np.asarray(landmark_indices, dtype=int).reshape(-1)
    if idx.size == 0:
        raise ValueError("empty landmark set")
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("landmark indices must be distinct")
    if idx.min() < 0 or idx.max() >= len(batch):
        raise ValueError("landmark index out of range")
    c = kphi_cross(kspec, espec, lift, batch, batch.subset(idx))
    w = c[idx]
    w = 0.5 * (w + w.T)
    ev, vec = np.linalg.eigh(w)
    top = ev.max(initial=0.0)
    keep = ev > 1e-12 * top if top > 0 else np.zeros_like(ev, dtype=bool)
    wp = (vec[:, keep] / ev[keep]) @ vec[:, keep].T
    k = c @ wp @ c.T
    k = 0.5 * (k + k.T)
    lift = _lift_for(lift, batch.dim)
    return GramMatrix(k, spec_fingerprint(batch, kspec, espec, lift) + ":nystrom")
