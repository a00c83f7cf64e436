"""Scalar path kernels: signature PDE, truncated signatures, randomized signatures."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .paths import Path

VARIANTS = ("sig_pde", "truncated_sig", "randomized_sig")
ACTIVATIONS = ("tanh", "identity")
MAX_DYADIC_ORDER = 5
MAX_SIG_ORDER = 12
DIVERGENCE_BOUND = 1e100
DIVERGENCE_MSG = "PDE solution non-finite; reduce scale_gamma"


@dataclass(frozen=True)
class KernelSpec:
    """Path kernel choice. Only the fields of the chosen variant matter."""

    variant: str = "sig_pde"
    dyadic_order: int = 1
    order: int = 4
    reservoir_dim: int = 32
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if self.variant == "sig_pde" and not 0 <= int(self.dyadic_order) <= MAX_DYADIC_ORDER:
            raise ValueError(f"dyadic_order must lie in 0..{MAX_DYADIC_ORDER}")
        if self.variant == "truncated_sig" and not 1 <= int(self.order) <= MAX_SIG_ORDER:
            raise ValueError(f"truncation order must lie in 1..{MAX_SIG_ORDER}")
        if self.variant == "randomized_sig":
            if int(self.reservoir_dim) < 1:
                raise ValueError("reservoir_dim must be positive")
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"activation must be one of {ACTIVATIONS}")

    def to_dict(self) -> dict:
        if self.variant == "sig_pde":
            return {"variant": "sig_pde", "dyadic_order": int(self.dyadic_order)}
        if self.variant == "truncated_sig":
            return {"variant": "truncated_sig", "order": int(self.order)}
        return {"variant": "randomized_sig", "reservoir_dim": int(self.reservoir_dim),
                "activation": self.activation, "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, doc: dict) -> "KernelSpec":
        allowed = {"sig_pde": {"dyadic_order"}, "truncated_sig": {"order"},
                   "randomized_sig": {"reservoir_dim", "activation", "seed"}}
        variant = doc.get("variant", "sig_pde")
        if variant not in allowed:
            raise ValueError(f"unknown kernel variant {variant!r}")
        extra = set(doc) - allowed[variant] - {"variant"}
        if extra:
            raise ValueError(f"unknown keys for {variant}: {sorted(extra)}")
        return cls(**doc)


# ---------------------------------------------------------------- tensors

def sig_dim(d: int, order: int) -> int:
    return sum(d ** k for k in range(order + 1))


def _level_slices(d: int, order: int) -> list[slice]:
    out, start = [], 0
    for k in range(order + 1):
        out.append(slice(start, start + d ** k))
        start += d ** k
    return out


@dataclass(frozen=True, eq=False)
class SigTensor:
    """Truncated tensor with coefficients laid out level by level, words in
    lexicographic order inside each level."""

    d: int
    order: int
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float)
        if c.shape != (sig_dim(self.d, self.order),):
            raise ValueError("coefficient array has the wrong length")
        object.__setattr__(self, "coefficients", c)

    def level(self, k: int) -> np.ndarray:
        return self.coefficients[_level_slices(self.d, self.order)[k]]

    def inner(self, other: "SigTensor") -> float:
        if (self.d, self.order) != (other.d, other.order):
            raise ValueError("tensor shapes differ")
        return float(self.coefficients @ other.coefficients)

    def level_inner(self, other: "SigTensor") -> np.ndarray:
        return np.array([self.level(k) @ other.level(k) for k in range(self.order + 1)])


def _chen_step(levels: list, u: np.ndarray, order: int) -> None:
    """levels <- levels (x) exp(u), in place; arrays carry a leading batch axis."""
    n = u.shape[0]
    e = [np.ones((n, 1))]
    for m in range(1, order + 1):
        e.append((e[-1][:, :, None] * u[:, None, :]).reshape(n, -1) / m)
    for lev in range(order, 0, -1):
        acc = levels[lev] + e[lev]
        for k in range(1, lev):
            acc = acc + (levels[k][:, :, None] * e[lev - k][:, None, :]).reshape(n, -1)
        levels[lev] = acc


def batch_signature_prefixes(values: np.ndarray, order: int) -> np.ndarray:
    """Signatures of every prefix for equal-length paths.

    values: (n, L+1, d). Returns (n, L+1, sig_dim) with row t the signature of
    samples 0..t.
    """
    values = np.asarray(values, dtype=float)
    n, npts, d = values.shape
    out = np.empty((n, npts, sig_dim(d, order)))
    levels = [np.ones((n, 1))] + [np.zeros((n, d ** k)) for k in range(1, order + 1)]
    out[:, 0] = np.concatenate(levels, axis=1)
    for t in range(1, npts):
        _chen_step(levels, values[:, t] - values[:, t - 1], order)
        out[:, t] = np.concatenate(levels, axis=1)
    return out


def signature_prefixes(path: Path, order: int) -> np.ndarray:
    return batch_signature_prefixes(path.values[None], order)[0]


def truncated_signature(path: Path, order: int) -> SigTensor:
    """Signature up to ``order`` by Chen folding of the increments."""
    if order < 0:
        raise ValueError("signature order must be nonnegative")
    if order == 0:
        return SigTensor(path.dim, 0, np.ones(1))
    if order > MAX_SIG_ORDER:
        raise ValueError(f"signature order above {MAX_SIG_ORDER}")
    levels = [np.ones((1, 1))] + [np.zeros((1, path.dim ** k)) for k in range(1, order + 1)]
    for u in np.diff(path.values, axis=0):
        _chen_step(levels, u[None], order)
    return SigTensor(path.dim, order, np.concatenate(levels, axis=1)[0])


def chen_product(a: SigTensor, b: SigTensor) -> SigTensor:
    """Truncated tensor product a (x) b."""
    if (a.d, a.order) != (b.d, b.order):
        raise ValueError("tensor shapes differ")
    out = []
    for n in range(a.order + 1):
        acc = np.zeros(a.d ** n)
        for k in range(n + 1):
            acc = acc + np.multiply.outer(a.level(k), b.level(n - k)).ravel()
        out.append(acc)
    return SigTensor(a.d, a.order, np.concatenate(out))


# ---------------------------------------------------------------- PDE

@njit(cache=True)
def _pde_grid(x, y, dyadic_order):
    """Coarse restriction of the refined Goursat solution; NaN-filled on divergence."""
    lx = x.shape[0] - 1
    ly = y.shape[0] - 1
    out = np.ones((lx + 1, ly + 1))
    if lx == 0 or ly == 0:
        return out
    r = 1 << dyadic_order
    inc = np.empty((lx, ly))
    for i in range(lx):
        for j in range(ly):
            s = 0.0
            for k in range(x.shape[1]):
                s += (x[i + 1, k] - x[i, k]) * (y[j + 1, k] - y[j, k])
            inc[i, j] = s / (r * r)
    ny = ly * r
    prev = np.ones(ny + 1)
    cur = np.ones(ny + 1)
    for fi in range(lx * r):
        ci = fi // r
        cur[0] = 1.0
        big = 0.0
        for fj in range(ny):
            c = inc[ci, fj // r]
            v = (cur[fj] + prev[fj + 1]) * (1.0 + 0.5 * c + c * c / 12.0) - prev[fj] * (1.0 - c * c / 12.0)
            cur[fj + 1] = v
            a = abs(v)
            if not a <= big:
                big = a
        if not big <= DIVERGENCE_BOUND:
            out[:, :] = np.nan
            return out
        if (fi + 1) % r == 0:
            row = (fi + 1) // r
            for j in range(ly + 1):
                out[row, j] = cur[j * r]
        prev, cur = cur, prev
    return out


def _check_channels(x: Path, y: Path) -> None:
    if x.dim != y.dim:
        raise ValueError(f"channel mismatch: {x.dim} vs {y.dim}")


def sig_kernel_grid(x: Path, y: Path, dyadic_order: int = 1) -> np.ndarray:
    """Signature kernel of every prefix pair; entry (i, j) compares x_{0..i} with y_{0..j}."""
    _check_channels(x, y)
    if not 0 <= dyadic_order <= MAX_DYADIC_ORDER:
        raise ValueError(f"dyadic_order must lie in 0..{MAX_DYADIC_ORDER}")
    g = _pde_grid(np.ascontiguousarray(x.values), np.ascontiguousarray(y.values), int(dyadic_order))
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(DIVERGENCE_MSG)
    return g


# ---------------------------------------------------------------- randomized

def reservoir_params(spec: KernelSpec, d: int):
    """(A, b, z) with A: (d, M, M) ~ N(0, 1/M), b: (d, M), z: (M,) ~ N(0, 1)."""
    m = int(spec.reservoir_dim)
    rng = np.random.default_rng(int(spec.seed))
    a = rng.normal(0.0, 1.0 / np.sqrt(m), size=(d, m, m))
    b = rng.normal(size=(d, m))
    z = rng.normal(size=m)
    return a, b, z


def reservoir_states(values: np.ndarray, a, b, z, activation: str = "tanh") -> np.ndarray:
    """Euler states Z_t for every prefix. values: (n, L+1, d) -> (n, L+1, M)."""
    values = np.asarray(values, dtype=float)
    n, npts, d = values.shape
    act = np.tanh if activation == "tanh" else (lambda v: v)
    out = np.empty((n, npts, z.shape[0]))
    zc = np.tile(z, (n, 1))
    out[:, 0] = zc
    for t in range(1, npts):
        dx = values[:, t] - values[:, t - 1]
        step = np.zeros_like(zc)
        for i in range(d):
            step += act(zc @ a[i].T + b[i]) * dx[:, i:i + 1]
        zc = zc + step
        out[:, t] = zc
    return out


def randomized_signature(path: Path, spec: KernelSpec) -> np.ndarray:
    if spec.variant != "randomized_sig":
        raise ValueError("spec is not a randomized_sig kernel")
    a, b, z = reservoir_params(spec, path.dim)
    return reservoir_states(path.values[None], a, b, z, spec.activation)[0, -1]


# ---------------------------------------------------------------- dispatch

def batch_prefix_features(spec: KernelSpec, values: np.ndarray) -> np.ndarray:
    """Per-prefix feature vectors for the feature-based variants."""
    if spec.variant == "truncated_sig":
        return batch_signature_prefixes(values, spec.order)
    if spec.variant == "randomized_sig":
        a, b, z = reservoir_params(spec, values.shape[2])
        return reservoir_states(values, a, b, z, spec.activation)
    raise ValueError("sig_pde has no explicit feature map")


def prefix_grid(spec: KernelSpec, x: Path, y: Path) -> np.ndarray:
    """kappa(x_{0..i}, y_{0..j}) for all i, j under any variant."""
    _check_channels(x, y)
    if spec.variant == "sig_pde":
        return sig_kernel_grid(x, y, spec.dyadic_order)
    fx = batch_prefix_features(spec, x.values[None])[0]
    fy = batch_prefix_features(spec, y.values[None])[0]
    return fx @ fy.T


def kernel_eval(spec: KernelSpec, x: Path, y: Path) -> float:
    _check_channels(x, y)
    if spec.variant == "sig_pde":
        return float(sig_kernel_grid(x, y, spec.dyadic_order)[-1, -1])
    if spec.variant == "truncated_sig":
        return truncated_signature(x, spec.order).inner(truncated_signature(y, spec.order))
    return float(randomized_signature(x, spec) @ randomized_signature(y, spec))
