import io
from datetime import date

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from kernel_trading.paths import (EmbeddingSpec, Path, PathBatch, batch_fingerprint, batch_to_bars_csv,
                                  embed, increments, load_bars, prefix, uniform_path)
from conftest import random_batch, random_path

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_path_validation():
    with pytest.raises(ValueError):
        Path([0.0, 0.0], [[1.0], [2.0]])
    with pytest.raises(ValueError):
        Path([0.0, 1.0], [[1.0], [np.nan]])
    with pytest.raises(ValueError):
        Path([], np.zeros((0, 1)))
    p = Path([0.0, 1.0], [1.0, 2.0])
    assert p.values.shape == (2, 1) and p.n_steps == 1 and p.dim == 1
    with pytest.raises(ValueError):
        p.values[0, 0] = 3.0


@given(arrays(float, st.tuples(st.integers(1, 12), st.integers(1, 3)), elements=finite))
def test_path_json_roundtrip_is_exact(vals):
    p = uniform_path(vals, horizon=2.5)
    q = Path.from_json(p.to_json())
    assert np.array_equal(p.values, q.values) and np.array_equal(p.times, q.times)


def test_batch_roundtrip_and_fingerprint(rng):
    b = random_batch(rng, 4, 5, 2)
    b2 = PathBatch.from_json(b.to_json())
    assert batch_fingerprint(b) == batch_fingerprint(b2)
    b3 = b.subset([0, 1, 2])
    assert batch_fingerprint(b3) != batch_fingerprint(b)
    with pytest.raises(ValueError):
        PathBatch((random_path(rng, 3, 1), random_path(rng, 3, 2)))


def test_increments_and_prefix(rng):
    p = random_path(rng, 6, 2)
    assert np.allclose(increments(p).sum(axis=0), p.values[-1] - p.values[0])
    q = prefix(p, 3)
    assert len(q) == 4 and np.array_equal(q.values, p.values[:4])
    assert len(prefix(p, 0)) == 1
    with pytest.raises(IndexError):
        prefix(p, 7)


def test_embed_channels():
    p = Path([0.0, 0.5, 1.0], [[2.0], [3.0], [5.0]])
    s = Path([0.0, 0.5, 1.0], [[1.0], [1.0], [-1.0]])
    e = embed(p, EmbeddingSpec(scale_gamma=2.0), s)
    np.testing.assert_allclose(e.values, [[0, 0, 2], [0.5, 2, 2], [1, 6, -2]])
    e2 = embed(p, EmbeddingSpec(time_augment=False, basepoint="none"))
    np.testing.assert_allclose(e2.values, p.values)


def test_embed_prefix_commutes(rng):
    p = random_path(rng, 8, 2)
    spec = EmbeddingSpec(scale_gamma=1.7)
    full = embed(p, spec)
    for i in range(len(p)):
        assert np.array_equal(embed(prefix(p, i), spec).values, full.values[: i + 1])


def test_embed_grid_mismatch():
    p = Path([0.0, 1.0], [[0.0], [1.0]])
    s = Path([0.0, 0.7], [[0.0], [1.0]])
    with pytest.raises(ValueError, match="embedding grid mismatch"):
        embed(p, EmbeddingSpec(), s)


def test_embedding_spec_strict():
    doc = EmbeddingSpec(scale_gamma=3.0, horizon=2.0).to_dict()
    assert EmbeddingSpec.from_dict(doc).to_dict() == doc
    with pytest.raises(ValueError):
        EmbeddingSpec.from_dict({"scale": 1.0})


def test_load_bars_fixture_and_roundtrip(rng):
    from importlib import resources
    text = resources.files("kernel_trading").joinpath("data", "bars_fixture.csv").read_text()
    batch, rep = load_bars(io.StringIO(text))
    assert rep.sessions == 2 and rep.dropped == 1
    assert all(len(p) == 78 for p in batch.paths)
    csv_text = batch_to_bars_csv(batch, start_date=date(2024, 5, 6))
    again, _ = load_bars(io.StringIO(csv_text))
    for a, b in zip(batch.paths, again.paths):
        assert np.array_equal(a.values, b.values)


def test_load_bars_errors():
    with pytest.raises(ValueError, match="header"):
        load_bars(io.StringIO("a,b\n1,2\n"))
    bad = "timestamp,open,high,low,close,volume\n2024-01-02T09:30:00,1,1,1,x,0\n"
    with pytest.raises(ValueError, match="line 2"):
        load_bars(io.StringIO(bad))
    with pytest.raises(ValueError, match="no sessions"):
        load_bars(io.StringIO("timestamp,open,high,low,close,volume\n2024-01-02T09:30:00,1,1,1,1,0\n"))
