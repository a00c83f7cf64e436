"""Sampled trajectories, feature embeddings and bar-data ingestion."""
from __future__ import annotations

import csv
import hashlib
import io
import os
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from typing import Iterable, Sequence

import numpy as np

from . import _jsonio

BASEPOINTS = ("none", "translate_to_zero")
BAR_HEADER = ["timestamp", "open", "high", "low", "close", "volume"]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Path:
    """Values of shape (L+1, d) on an explicit, strictly increasing grid."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = _frozen(self.times).reshape(-1)
        v = _frozen(self.values)
        if v.ndim == 1:
            v = v.reshape(-1, 1)
            v.setflags(write=False)
        if v.ndim != 2:
            raise ValueError("path values must be a (L+1, d) matrix")
        if t.shape[0] != v.shape[0]:
            raise ValueError(f"grid has {t.shape[0]} points but values have {v.shape[0]} rows")
        if t.shape[0] < 1:
            raise ValueError("path needs at least one grid point")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValueError("path contains non-finite entries")
        if t.shape[0] > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("path times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def n_steps(self) -> int:
        """Number of increments L."""
        return self.values.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def to_dict(self) -> dict:
        return {"times": self.times, "values": self.values}

    @classmethod
    def from_dict(cls, doc: dict) -> "Path":
        return cls(np.asarray(doc["times"], dtype=float), np.asarray(doc["values"], dtype=float))

    def to_json(self) -> str:
        return _jsonio.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Path":
        return cls.from_dict(_jsonio.loads(text, "path document"))


def uniform_path(values, horizon: float = 1.0) -> Path:
    """Path on the equispaced grid 0, horizon/L, ..., horizon."""
    v = np.asarray(values, dtype=float)
    n = v.shape[0]
    times = np.linspace(0.0, horizon, n) if n > 1 else np.zeros(1)
    return Path(times, v)


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Paths sharing a channel count. ``signals`` optionally pairs each path
    with an auxiliary path on the same grid (used by embeddings)."""

    paths: tuple
    label: str = ""
    signals: tuple | None = None

    def __post_init__(self):
        paths = tuple(self.paths)
        if paths:
            d = paths[0].dim
            for k, p in enumerate(paths):
                if p.dim != d:
                    raise ValueError(f"path {k} has {p.dim} channels, expected {d}")
        object.__setattr__(self, "paths", paths)
        if self.signals is not None:
            sig = tuple(self.signals)
            if len(sig) != len(paths):
                raise ValueError("signals must pair one-to-one with paths")
            object.__setattr__(self, "signals", sig)

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, k) -> Path:
        return self.paths[k]

    def __iter__(self):
        return iter(self.paths)

    @property
    def dim(self) -> int:
        if not self.paths:
            raise ValueError("empty batch has no channel count")
        return self.paths[0].dim

    def signal(self, k: int) -> Path | None:
        return None if self.signals is None else self.signals[k]

    def subset(self, indices: Iterable[int], label: str | None = None) -> "PathBatch":
        idx = [int(i) for i in indices]
        sig = None if self.signals is None else tuple(self.signals[i] for i in idx)
        return PathBatch(tuple(self.paths[i] for i in idx), self.label if label is None else label, sig)

    def with_signals(self, signals: Sequence[Path]) -> "PathBatch":
        return PathBatch(self.paths, self.label, tuple(signals))

    def to_dict(self) -> dict:
        doc = {"label": self.label, "paths": [p.to_dict() for p in self.paths]}
        if self.signals is not None:
            doc["signals"] = [s.to_dict() for s in self.signals]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PathBatch":
        paths = tuple(Path.from_dict(p) for p in doc["paths"])
        signals = doc.get("signals")
        if signals is not None:
            signals = tuple(Path.from_dict(s) for s in signals)
        return cls(paths, doc.get("label", ""), signals)

    def to_json(self) -> str:
        return _jsonio.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PathBatch":
        return cls.from_dict(_jsonio.loads(text, "batch document"))


def batch_fingerprint(batch: PathBatch) -> str:
    """Content hash over grids, values and signals."""
    h = hashlib.sha256()
    h.update(str(len(batch)).encode())
    for k, p in enumerate(batch.paths):
        for arr in (p.times, p.values):
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        s = batch.signal(k)
        if s is not None:
            h.update(b"sig")
            h.update(np.ascontiguousarray(s.values, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class EmbeddingSpec:
    """Feature map psi applied before the path kernel.

    The time channel is t / horizon. A fixed horizon (rather than the last
    grid time of whatever is passed in) keeps the embedding of a prefix equal
    to the prefix of the embedding, which the online strategy relies on.
    """

    time_augment: bool = True
    signal_channels: Path | None = None
    scale_gamma: float = 1.0
    basepoint: str = "translate_to_zero"
    horizon: float = 1.0

    def __post_init__(self):
        if not (self.scale_gamma > 0 and np.isfinite(self.scale_gamma)):
            raise ValueError("scale_gamma must be positive")
        if self.basepoint not in BASEPOINTS:
            raise ValueError(f"basepoint must be one of {BASEPOINTS}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def replace(self, **kw) -> "EmbeddingSpec":
        d = dict(time_augment=self.time_augment, signal_channels=self.signal_channels,
                 scale_gamma=self.scale_gamma, basepoint=self.basepoint, horizon=self.horizon)
        d.update(kw)
        return EmbeddingSpec(**d)

    def to_dict(self) -> dict:
        doc = {"time_augment": bool(self.time_augment), "scale_gamma": float(self.scale_gamma),
               "basepoint": self.basepoint, "horizon": float(self.horizon)}
        if self.signal_channels is not None:
            doc["signal_channels"] = self.signal_channels.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EmbeddingSpec":
        doc = dict(doc)
        known = {"time_augment", "scale_gamma", "basepoint", "horizon", "signal_channels"}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown embedding keys: {sorted(extra)}")
        sig = doc.pop("signal_channels", None)
        return cls(signal_channels=None if sig is None else Path.from_dict(sig), **doc)


def embed(path: Path, spec: EmbeddingSpec, signal: Path | None = None) -> Path:
    """psi(path): [t/T] ++ scale_gamma * (x - x0) ++ scale_gamma * signal."""
    if signal is None:
        signal = spec.signal_channels
    cols = []
    if spec.time_augment:
        cols.append((path.times / spec.horizon)[:, None])
    x = path.values
    if spec.basepoint == "translate_to_zero":
        x = x - x[0]
    cols.append(spec.scale_gamma * x)
    if signal is not None:
        n = len(path)
        if len(signal) < n or not np.array_equal(signal.times[:n], path.times):
            raise ValueError("embedding grid mismatch")
        # a longer signal is allowed so that prefixes can reuse the full signal
        cols.append(spec.scale_gamma * signal.values[:n])
    return Path(path.times, np.hstack(cols))


def increments(path: Path) -> np.ndarray:
    """(L, d) array of left-to-right differences."""
    return np.diff(path.values, axis=0)


def prefix(path: Path, i: int) -> Path:
    """First i+1 samples."""
    i = int(i)
    if not 0 <= i <= path.n_steps:
        raise IndexError(f"prefix index {i} outside 0..{path.n_steps}")
    return Path(path.times[: i + 1], path.values[: i + 1])


@dataclass(frozen=True)
class BarRecord:
    timestamp: datetime
    open: float
    high: float
    low: float
    close: float
    volume: float

    def __post_init__(self):
        vals = (self.open, self.high, self.low, self.close, self.volume)
        if not all(np.isfinite(vals)):
            raise ValueError("non-finite bar field")
        if self.high < max(self.open, self.close) or self.low > min(self.open, self.close):
            raise ValueError("bar violates low <= open/close <= high")
        if self.volume < 0:
            raise ValueError("negative volume")


@dataclass(frozen=True)
class LoadReport:
    sessions: int
    dropped: int
    dropped_dates: tuple = field(default_factory=tuple)


def _read_source(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8")
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read().decode("utf-8")
    data = source.read()
    return data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data


def load_bars(source, session: tuple[time, time] = (time(9, 30), time(16, 0)),
              bars_per_session: int = 78, label: str = "bars") -> tuple[PathBatch, LoadReport]:
    """Parse a bar CSV into one close-price path per complete session.

    Bars with session[0] <= clock time < session[1] belong to that date's
    session. Sessions without exactly ``bars_per_session`` bars are dropped
    and counted in the report. Each path lives on the grid linspace(0, 1, n).
    """
    text = _read_source(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("no sessions: empty bar file") from None
    if [h.strip() for h in header] != BAR_HEADER:
        raise ValueError(f"line 1: expected header {','.join(BAR_HEADER)}")
    start, end = session
    by_day: dict[date, list[float]] = {}
    last = None
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 6:
            raise ValueError(f"line {lineno}: expected 6 fields, got {len(row)}")
        try:
            ts = datetime.fromisoformat(row[0].strip())
            o, h, lo, c, v = (float(x) for x in row[1:])
            bar = BarRecord(ts, o, h, lo, c, v)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: malformed bar ({exc})") from None
        if last is not None and bar.timestamp <= last:
            raise ValueError(f"line {lineno}: rows are not strictly time-sorted")
        last = bar.timestamp
        clock = bar.timestamp.time().replace(tzinfo=None)
        if start <= clock < end:
            by_day.setdefault(bar.timestamp.date(), []).append(bar.close)
    paths, dropped = [], []
    for day in sorted(by_day):
        closes = by_day[day]
        if len(closes) == bars_per_session:
            paths.append(uniform_path(np.asarray(closes)[:, None]))
        else:
            dropped.append(day.isoformat())
    if not paths:
        raise ValueError("no sessions: no complete trading session in input")
    return PathBatch(tuple(paths), label), LoadReport(len(paths), len(dropped), tuple(dropped))


def batch_to_bars_csv(batch: PathBatch, start_date: date = date(2024, 1, 2),
                      session_start: time = time(9, 30), bar_minutes: int = 5,
                      volume: float = 0.0) -> str:
    """Write 1-channel paths as consecutive weekday sessions (flat OHLC bars)."""
    if batch.dim != 1:
        raise ValueError("bar export needs single-channel paths")
    out = io.StringIO()
    out.write(",".join(BAR_HEADER) + "\n")
    day = start_date
    for p in batch.paths:
        while day.weekday() >= 5:
            day += timedelta(days=1)
        t0 = datetime.combine(day, session_start)
        for k, c in enumerate(p.values[:, 0]):
            s = repr(float(c))
            ts = (t0 + timedelta(minutes=bar_minutes * k)).isoformat()
            out.write(f"{ts},{s},{s},{s},{s},{repr(float(volume))}\n")
        day += timedelta(days=1)
    return out.getvalue()
