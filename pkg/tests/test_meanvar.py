import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kernel_trading.meanvar import (FitConfig, alpha_direct, alpha_spectral, calibrate_eta,
                                    covariance_operator, expected_pnl, grid_search, kfold_indices,
                                    moments, objective_ratio, penalised_objective, pnl_variance,
                                    pnl_vector, split_indices, stability_metric, variance_curve,
                                    write_score_table)
from kernel_trading.paths import EmbeddingSpec
from kernel_trading.sigkernel import KernelSpec
from kernel_trading.synth import OUParams, gen_ou

K2 = np.diag([1.0, 3.0])


def random_psd(rng, n, cond=1e4):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.logspace(0, -math.log10(cond), n) * rng.uniform(0.5, 2.0)
    return (q * ev) @ q.T


def test_hand_computed_two_path_system():
    # (I + 2 * (1/2)(I - 11^T/2) K) alpha = 1 solved by hand
    alpha = alpha_direct(K2, FitConfig(1.0, 2.0)).alpha
    np.testing.assert_allclose(alpha, [4 / 3, 2 / 3], rtol=1e-14)
    np.testing.assert_allclose(alpha_spectral(K2, FitConfig(1.0, 2.0)).alpha, [4 / 3, 2 / 3], rtol=1e-13)


def test_hand_computed_moments_and_operator():
    m = moments(K2)
    np.testing.assert_allclose(m.mu_phi, [0.25, 0.75])
    np.testing.assert_allclose(m.sigma_phi, [[0.0625, -0.1875], [-0.1875, 0.5625]])
    np.testing.assert_allclose(covariance_operator(K2), [[0.25, -0.75], [-0.25, 0.75]])
    assert np.array_equal(covariance_operator(np.zeros((3, 3))), np.zeros((3, 3)))
    xi = covariance_operator(np.eye(4))
    np.testing.assert_allclose(xi, (np.eye(4) - 0.25) / 4)
    np.testing.assert_allclose(np.ones(4) @ covariance_operator(random_psd(np.random.default_rng(0), 4)),
                               0.0, atol=1e-15)


def test_spectral_equals_direct(rng):
    for _ in range(10):
        k = random_psd(rng, 30)
        cfg = FitConfig(float(rng.uniform(1e-3, 1)), float(rng.uniform(0.1, 10)))
        a = alpha_direct(k, cfg).alpha
        b = alpha_spectral(k, cfg).alpha
        assert np.linalg.norm(a - b) <= 1e-8 * np.linalg.norm(a)


def test_degenerate_cases(rng):
    np.testing.assert_allclose(alpha_spectral(np.zeros((5, 5)), FitConfig(0.5)).alpha, 2.0)
    np.testing.assert_allclose(alpha_spectral(random_psd(rng, 5), FitConfig(0.25, 0.0)).alpha, 4.0)
    v = np.array([1.0, -1.0, 0.0])
    with pytest.raises(np.linalg.LinAlgError, match="orthogonal"):
        alpha_spectral(np.outer(v, v) * 5, FitConfig(1.0, 1.0, rank_m=1))


def test_moments_match_pnl_functionals(rng):
    k = random_psd(rng, 12)
    a = alpha_spectral(k, FitConfig(0.1, 2.0)).alpha
    m = moments(k)
    assert expected_pnl(a, k) == pytest.approx(a @ m.mu_phi, rel=1e-12)
    assert pnl_variance(a, k) == pytest.approx(a @ m.sigma_phi @ a, rel=1e-10)
    assert penalised_objective(a, k, 2.0) == pytest.approx(a @ m.mu_phi - a @ m.sigma_phi @ a, rel=1e-10)


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_objective_ratio_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    k = random_psd(rng, 8)
    a = rng.standard_normal(8)
    m = moments(k)
    assert objective_ratio(c * a, m) == pytest.approx(objective_ratio(a, m), rel=1e-9)
    assert objective_ratio(-a, m) == pytest.approx(-objective_ratio(a, m), rel=1e-9)


def test_objective_ratio_zero_variance():
    with pytest.raises(ZeroDivisionError):
        objective_ratio(np.ones(3), moments(np.ones((3, 3))))


def test_pnl_vector_shape(rng):
    c = rng.standard_normal((4, 7))
    a = rng.standard_normal(4)
    np.testing.assert_allclose(pnl_vector(a, c), a @ c / 4)


def test_stability_metric():
    lam = [1e-3, 1e-2, 1e-1]
    j = [1.0, 1.0 + math.log(10), 1.0 + 3 * math.log(10)]
    assert stability_metric(lam, j) == pytest.approx(math.sqrt(1 + 4))
    with pytest.raises(ValueError):
        stability_metric([1e-2, 1e-3], [0, 1])
    with pytest.raises(ValueError):
        stability_metric([1e-2], [0])


def _gram200():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((200, 6))
    return x @ x.T


def test_calibrate_eta_hits_target():
    k = _gram200()
    lam = 1e-2
    lo, hi = variance_curve(k, lam, [1e-6, 1e12])
    delta = math.sqrt(lo * hi) if hi > 0 else lo / 10
    eta = calibrate_eta(k, lam, delta)
    real = variance_curve(k, lam, [eta])[0]
    assert abs(real - delta) / delta <= 1e-3
    curve = variance_curve(k, lam, np.logspace(-6, 12, 60))
    assert np.all(np.diff(curve) <= 1e-9 * curve.max())


def test_calibrate_eta_unreachable():
    k = _gram200()
    with pytest.raises(ValueError, match="achievable range"):
        calibrate_eta(k, 1e-2, 1e30)
    with pytest.raises(ValueError):
        calibrate_eta(k, 1e-2, -1.0)


def test_fit_config_roundtrip_and_validation():
    cfg = FitConfig(0.1, 2.0, 5, False)
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(lam=0.0), dict(lam=1.0, eta=-1.0), dict(lam=1.0, rank_m=0)):
        with pytest.raises(ValueError):
            FitConfig(**bad)
    with pytest.raises(ValueError):
        FitConfig.from_dict({"lambda": 1.0, "mu": 2})
    with pytest.raises(ValueError):
        FitConfig(1.0, rank_m=9).rank(5)


def test_splits():
    tr, va = split_indices(20, 0.25, 3)
    assert len(va) == 5 and not set(tr) & set(va)
    folds = kfold_indices(10, 3)
    assert sorted(np.concatenate([v for _, v in folds]).tolist()) == list(range(10))


def _ou_batch(n, seed):
    p = OUParams(theta=[2.0], mu=[1.0], sigma=[0.3])
    return gen_ou(p, n, 10, 0.1, seed)


def test_grid_search_selects_best_cell():
    res = grid_search(_ou_batch(40, 0), KernelSpec(dyadic_order=0), EmbeddingSpec(), None,
                      [0.5, 1.0], [1e-3, 1e-2, 1e-1], ["full", 4], 1.0, val_batch=_ou_batch(20, 1))
    assert len(res.table) == 2 * 3 * 2
    best = max(r["objective_val"] for r in res.table)
    assert res.score == best
    assert len(res.weights.alpha) == 40
    text = write_score_table(res.table)
    assert text.splitlines()[0].startswith("scale_gamma,lambda,m")
    assert len(text.splitlines()) == 13


def test_grid_search_folds_and_duplicates():
    b = _ou_batch(30, 2)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = grid_search(b, KernelSpec(dyadic_order=0), EmbeddingSpec(), None, [1.0, 1.0], [1e-2],
                          ["full"], 1.0, folds=3)
    assert any("duplicate" in str(x.message) for x in w)
    assert len(res.table) == 1 and len(res.weights.alpha) == 30


def test_grid_search_tie_break_prefers_larger_lambda(monkeypatch):
    import kernel_trading.meanvar as mv

    def flat_cells(k_all, tr, va, lams, m_grid, eta):
        return {(lam, m): (0.0, 1.0, 1.0, "") for lam in lams for m in mv._rank_grid(m_grid, len(tr))}

    monkeypatch.setattr(mv, "_score_cells", flat_cells)
    res = grid_search(_ou_batch(12, 4), KernelSpec(dyadic_order=0), EmbeddingSpec(), None, [1.0],
                      [1e-3, 1e-1, 1e-2], [2, 5, "full"], 1.0)
    assert res.lam == 1e-1 and res.m == 2


def test_grid_search_skips_divergent_scale():
    b = _ou_batch(16, 1)
    with pytest.warns(UserWarning, match=r"scale_gamma=1e\+60"):
        res = grid_search(b, KernelSpec(dyadic_order=0), EmbeddingSpec(), None, [1.0, 1e60], [1e-2],
                          ["full"], 1.0)
    assert res.scale_gamma == 1.0
    assert any(r["error"] for r in res.table)


def test_indefinite_gram_is_projected(rng):
    k = random_psd(rng, 20)
    k -= 1e-7 * np.eye(20) * np.abs(k).max() + np.diag(np.r_[np.zeros(19), 1e-3])
    spec = mv_spectrum(k)
    assert spec.values.min() == 0.0
    curve = variance_curve(k, 1e-3, np.logspace(-6, 12, 40))
    assert np.all(np.isfinite(curve)) and np.all(np.diff(curve) <= 1e-9 * curve.max())
    with pytest.warns(UserWarning, match="indefinite"):
        mv_spectrum(k - 0.1 * np.eye(20))


from kernel_trading.meanvar import spectrum as mv_spectrum  # noqa: E402
