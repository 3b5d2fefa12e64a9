import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, special, stats

from bsindy.diagnostics import mc_standard_error
from bsindy.mcmc import (
    ChainConfig,
    ChainError,
    _mh_sweep,
    _normal_tail,
    load_chain,
    log_likelihood,
    mh_alpha_step,
    relu_conditional,
    relu_exact_alpha_step,
    rescale_step,
    run_chain,
    sample_sigma2,
    sample_w_conditional,
    save_chain,
    truncated,
    w_conditional_moments,
)
from bsindy.neuronized import Activation, PriorConfig

RELU = Activation("relu")
IDENTITY = Activation("identity")


def _instance(seed, m=20, p=3):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(m, p))
    z = D @ rng.normal(size=p) + 0.3 * rng.normal(size=m)
    return D, z


# ---------------------------------------------------------------------------
# w | alpha


def test_spike_state_gives_prior_draw():
    D, z = _instance(0)
    prior = PriorConfig(RELU, alpha0=0.0, tau_w=2.0)
    mu, Sigma = w_conditional_moments(D, z, np.full(3, -1.0), prior, 0.5)
    assert_array_equal(mu, 0.0)
    assert_allclose(Sigma, 4.0 * np.eye(3), atol=1e-12)


def test_scalar_conjugate_mean():
    m, sigma2, tau = 15, 0.4, 0.7
    z = np.linspace(-1, 3, m)
    prior = PriorConfig(IDENTITY, alpha0=0.0, tau_w=tau)
    mu, Sigma = w_conditional_moments(np.ones((m, 1)), z, np.array([1.0]), prior, sigma2)
    assert_allclose(mu, [m * z.mean() / (m + sigma2 / tau ** 2)], rtol=1e-12)
    assert_allclose(Sigma, [[sigma2 / (m + sigma2 / tau ** 2)]], rtol=1e-12)


def test_w_draws_match_moments():
    D, z = _instance(1)
    prior = PriorConfig(Activation.from_name("horseshoe"), alpha0=0.2, tau_w=1.5)
    alpha = np.array([0.3, -0.4, 1.1])
    mu, Sigma = w_conditional_moments(D, z, alpha, prior, 0.2)
    rng = np.random.default_rng(2)
    n = 10_000
    W = np.array([sample_w_conditional(D, z, alpha, prior, 0.2, seed=rng) for _ in range(n)])
    se_mean = np.sqrt(np.diag(Sigma) / n)
    assert np.all(np.abs(W.mean(0) - mu) <= 3 * se_mean)
    C = np.cov(W.T)
    se_cov = np.sqrt((np.outer(np.diag(Sigma), np.diag(Sigma)) + Sigma ** 2) / n)
    assert np.all(np.abs(C - Sigma) <= 3 * se_cov)


@pytest.mark.parametrize("seed", range(5))
def test_covariance_symmetric_positive_definite(seed):
    D, z = _instance(seed, m=30, p=6)
    D[:, 5] = D[:, 4] * (1 + 1e-9)  # nearly collinear columns
    rng = np.random.default_rng(seed)
    prior = PriorConfig(IDENTITY, tau_w=10.0)
    _, Sigma = w_conditional_moments(D, z, rng.normal(size=6) * 3, prior, 1e-3)
    assert np.abs(Sigma - Sigma.T).max() <= 1e-10 * np.abs(Sigma).max()
    assert np.linalg.eigvalsh(Sigma).min() > 0


def test_w_draw_reproducible():
    D, z = _instance(3)
    prior = PriorConfig(RELU, tau_w=1.0)
    a = sample_w_conditional(D, z, np.ones(3), prior, 0.1, seed=9)
    b = sample_w_conditional(D, z, np.ones(3), prior, 0.1, seed=9)
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# likelihood


def test_log_likelihood_examples():
    D = np.eye(2)
    prior = PriorConfig(IDENTITY)
    alpha = np.ones(2)
    assert log_likelihood(D, [1.0, 2.0], alpha, [1.0, 2.0], prior, 1.0) == 0.0
    one = log_likelihood(D, [0.0, 0.0], alpha, [1.0, 0.0], prior, 1.0)
    two = log_likelihood(D, [0.0, 0.0], alpha, [2.0, 0.0], prior, 1.0)
    assert two == 4 * one == -2.0


def test_log_likelihood_matches_independent_residual(rng):
    for _ in range(20):
        D = rng.normal(size=(12, 4))
        z, alpha, w = rng.normal(size=12), rng.normal(size=4), rng.normal(size=4)
        xi = np.maximum(alpha - 0.3, 0) * w
        ssr = sum((z[i] - sum(D[i, k] * xi[k] for k in range(4))) ** 2 for i in range(12))
        got = log_likelihood(D, z, alpha, w, PriorConfig(RELU, alpha0=0.3), 0.7)
        assert abs(got + ssr / 1.4) <= 1e-10 * max(1.0, ssr)


# ---------------------------------------------------------------------------
# alpha | w, Metropolis


def test_zero_step_always_accepts():
    D, z = _instance(4)
    prior = PriorConfig(IDENTITY)
    alpha, w = np.array([0.1, 2.0, -3.0]), np.ones(3)
    r = z - D @ (alpha * w)
    DT = np.ascontiguousarray(D.T)
    acc = _mh_sweep(DT, (DT * DT).sum(1), r, alpha, w, prior, 0.01, 0.0, np.random.default_rng(0))
    assert acc.all()
    with pytest.raises(ValueError):
        mh_alpha_step(D, z, alpha, w, prior, 1.0, rw_step=0.0)


def test_flat_likelihood_recovers_prior():
    D, z = _instance(5, p=2)
    prior = PriorConfig(IDENTITY)
    rng = np.random.default_rng(1)
    alpha, w = np.zeros(2), np.array([1.0, -2.0])
    DT = np.ascontiguousarray(D.T)
    colsq = (DT * DT).sum(1)
    n = 40_000
    out = np.empty((n, 2))
    for i in range(n):
        r = z - D @ (alpha * w)
        _mh_sweep(DT, colsq, r, alpha, w, prior, 1e12, 1.5, rng)
        out[i] = alpha
    se_m = mc_standard_error(out)
    se_v = mc_standard_error(out ** 2)
    assert np.all(np.abs(out.mean(0)) <= 3 * se_m)
    assert np.all(np.abs((out ** 2).mean(0) - 1) <= 3 * se_v)


def _target_1d(a, d, z, w, prior, sigma2):
    xi = prior.scale(a) * w
    r = z[None, :] - np.outer(xi, d)
    return -0.5 * a * a - (r * r).sum(1) / (2 * sigma2)


def test_detailed_balance_on_binned_states():
    rng = np.random.default_rng(6)
    d = rng.normal(size=8)
    z = 0.8 * d + 0.3 * rng.normal(size=8)
    prior = PriorConfig(RELU, alpha0=0.2)
    w, sigma2 = np.array([1.2]), 0.3
    D = d[:, None]
    DT = np.ascontiguousarray(D.T)
    colsq = (DT * DT).sum(1)
    alpha = np.zeros(1)
    n = 200_000
    trace = np.empty(n + 1)
    trace[0] = alpha[0]
    for i in range(n):
        r = z - D @ (prior.scale(alpha) * w)
        _mh_sweep(DT, colsq, r, alpha, w, prior, sigma2, 0.8, rng)
        trace[i + 1] = alpha[0]
    edges = np.array([-np.inf, -1.0, -0.3, 0.2, 0.6, 1.0, 1.5, np.inf])
    b = np.digitize(trace, edges) - 1
    k = len(edges) - 1
    N = np.zeros((k, k))
    np.add.at(N, (b[:-1], b[1:]), 1)
    # stationary flux balance: N_ij and N_ji differ only by Monte Carlo noise
    for i in range(k):
        for j in range(i + 1, k):
            tot = N[i, j] + N[j, i]
            if tot > 50:
                assert abs(N[i, j] - N[j, i]) <= 4 * np.sqrt(tot)
    # occupancy against the numerically integrated target
    grid = np.linspace(-6, 6, 24_001)
    dens = np.exp(_target_1d(grid, d, z, w, prior, sigma2))
    dens /= np.trapezoid(dens, grid)
    cdf = np.concatenate([[0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    probs = np.diff(np.interp(np.clip(edges, -6, 6), grid, cdf))
    occ = np.bincount(b, minlength=k) / b.size
    se = mc_standard_error(np.eye(k)[b])
    assert np.all(np.abs(occ - probs) <= 4 * se + 1e-3)


# ---------------------------------------------------------------------------
# alpha | w, exact ReLU update


def test_relu_conditional_with_zero_weight_is_standard_normal():
    for a0 in (-1.0, 0.0, 0.5, 2.0):
        p_slab, mean, prec = relu_conditional(3.0, 5.0, 0.0, a0, 0.1)
        assert_allclose(p_slab, stats.norm.sf(a0), rtol=1e-12)
        assert prec == 1.0 and mean == -a0
    rng = np.random.default_rng(7)
    D, z = _instance(7, p=1)
    prior = PriorConfig(RELU, alpha0=0.5)
    draws = np.array([relu_exact_alpha_step(D, z, [0.0], [0.0], prior, 1.0, seed=rng)[0] for _ in range(20_000)])
    assert stats.kstest(draws, "norm").pvalue > 0.01


def test_relu_conditional_flat_likelihood_limit():
    p_slab, mean, prec = relu_conditional(4.0, 10.0, 2.0, 0.5, 1e14)
    assert_allclose(p_slab, stats.norm.sf(0.5), rtol=1e-9)
    assert_allclose([mean, prec], [-0.5, 1.0], atol=1e-9)


@pytest.mark.parametrize("dr, colsq, w, a0, s2", [
    (3.0, 5.0, 0.7, 0.5, 0.4), (-2.0, 1.0, 2.0, 0.0, 1.0), (10.0, 20.0, 0.1, -1.0, 0.05), (0.5, 3.0, -1.5, 1.2, 2.0),
])
def test_relu_slab_probability_against_quadrature(dr, colsq, w, a0, s2):
    # log density of alpha: -alpha^2/2 - ((s w)^2 colsq - 2 s w dr) / (2 s2), s = max(alpha - a0, 0)
    def dens(a):
        s = max(a - a0, 0.0)
        return np.exp(-0.5 * a * a - ((s * w) ** 2 * colsq - 2 * s * w * dr) / (2 * s2))

    spike = integrate.quad(dens, -np.inf, a0)[0]
    slab = integrate.quad(dens, a0, np.inf)[0]
    p_slab, mean, prec = relu_conditional(dr, colsq, w, a0, s2)
    assert_allclose(p_slab, slab / (spike + slab), rtol=1e-7)
    # slab mean of s = alpha - a0 for the truncated Gaussian
    m1 = integrate.quad(lambda a: (a - a0) * dens(a), a0, np.inf)[0] / slab
    sd = 1 / np.sqrt(prec)
    assert_allclose(m1, stats.truncnorm(-mean / sd, np.inf, loc=mean, scale=sd).mean(), rtol=1e-7)


@pytest.mark.parametrize("a", [-2.0, 0.0, 1.5, 8.0, 29.0, 31.0, 45.0])
def test_normal_tail_sampler(a):
    rng = np.random.default_rng(int(a * 10) + 100)
    x = np.array([_normal_tail(a, rng) for _ in range(20_000)])
    assert x.min() >= a
    assert stats.kstest(x, stats.truncnorm(a, np.inf).cdf).pvalue > 0.01


def _vectorised_mh_conditional(d, r_minus, w, a0, sigma2, n_chains, n_steps, step, rng):
    """Independent random-walk MH for one alpha_j, many chains in parallel."""
    def logp(a):
        s = np.maximum(a - a0, 0.0)
        res = r_minus[None, :] - np.outer(s * w, d)
        return -0.5 * a * a - (res * res).sum(1) / (2 * sigma2)

    a = rng.standard_normal(n_chains)
    lp = logp(a)
    for _ in range(n_steps):
        prop = a + step * rng.standard_normal(n_chains)
        lq = logp(prop)
        ok = np.log(rng.random(n_chains)) < lq - lp
        a = np.where(ok, prop, a)
        lp = np.where(ok, lq, lp)
    return a


def test_relu_exact_matches_long_run_metropolis():
    # one coordinate of a 20 x 3 problem with the other two held fixed
    D, z = _instance(8)
    prior = PriorConfig(RELU, alpha0=0.5)
    alpha = np.array([0.9, 1.3, -0.2])
    w = np.array([0.8, -0.6, 1.1])
    sigma2 = 0.5
    xi = prior.scale(alpha) * w
    r_minus = z - D[:, 1:] @ xi[1:]
    rng = np.random.default_rng(9)
    exact = np.array([relu_exact_alpha_step(D, z, alpha, w, prior, sigma2, seed=rng, coords=[0])[0]
                      for _ in range(100_000)])
    # 10^4 chains x 100 steps = 10^6 MH steps, one retained draw per 100
    mh = _vectorised_mh_conditional(D[:, 0], r_minus, w[0], 0.5, sigma2, 10_000, 100, 0.9, rng)
    res = stats.ks_2samp(exact, mh)
    n, k = exact.size, mh.size
    crit = 1.628 * np.sqrt((n + k) / (n * k))  # 1% two-sample critical value
    assert res.statistic < crit
    assert 0.05 < np.mean(exact <= 0.5) < 0.95  # both branches matter here


def test_relu_exact_requires_relu():
    D, z = _instance(0)
    with pytest.raises(ValueError):
        relu_exact_alpha_step(D, z, np.zeros(3), np.ones(3), PriorConfig(IDENTITY), 1.0)


# ---------------------------------------------------------------------------
# rescale move


def test_rescale_preserves_coefficients(rng):
    for act in (IDENTITY, RELU, Activation.from_name("horseshoe")):
        prior = PriorConfig(act, alpha0=0.3, tau_w=2.0)
        alpha, w = rng.normal(size=50), rng.normal(size=50)
        a2, w2, acc = rescale_step(alpha, w, prior, step=0.7, seed=1)
        assert acc.any()
        assert_allclose(prior.scale(a2) * w2, prior.scale(alpha) * w, rtol=1e-12, atol=1e-15)
        if act is RELU:
            frozen = alpha <= 0.3
            assert_array_equal(a2[frozen], alpha[frozen])


@pytest.mark.parametrize("act", [IDENTITY, RELU, Activation.from_name("horseshoe")], ids=lambda a: a.kind)
def test_rescale_leaves_prior_invariant(act):
    prior = PriorConfig(act, alpha0=0.3, tau_w=2.0)
    rng = np.random.default_rng(10)
    alpha, w = rng.standard_normal(20_000), 2.0 * rng.standard_normal(20_000)
    for _ in range(10):
        alpha, w, _ = rescale_step(alpha, w, prior, step=0.8, seed=rng)
    assert stats.kstest(alpha, "norm").pvalue > 0.01
    assert stats.kstest(w / 2.0, "norm").pvalue > 0.01


# ---------------------------------------------------------------------------
# sigma^2


def test_sigma2_posterior_mean():
    rng = np.random.default_rng(11)
    ssr, m, a0, b0 = 7.5, 30, 1.0, 1.0
    draws = np.array([sample_sigma2(ssr, m, a0, b0, seed=rng) for _ in range(100_000)])
    mean = (b0 + ssr / 2) / (a0 + m / 2 - 1)
    assert abs(draws.mean() - mean) <= 3 * draws.std() / np.sqrt(draws.size)


def test_sigma2_without_data_is_prior():
    rng = np.random.default_rng(12)
    draws = np.array([sample_sigma2(0.0, 0, 1.0, 1.0, seed=rng) for _ in range(20_000)])
    assert stats.kstest(draws, stats.invgamma(1.0, scale=1.0).cdf).pvalue > 0.01
    with pytest.raises(ValueError):
        sample_sigma2(-1.0, 3)
    with pytest.raises(ValueError):
        sample_sigma2(1.0, 3, a0=0.0)


def test_config_round_trip():
    prior = PriorConfig(RELU, alpha0=0.5, tau_w=2.5)
    cfg = ChainConfig(prior, iterations=500, learn_sigma2=True, a0=1.0, b0=1.0, sigma_init=0.1,
                      seed=4, alpha_update="relu-exact")
    back = ChainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


@pytest.mark.parametrize("kwargs", [
    dict(iterations=5), dict(burn_in=1.0), dict(burn_in=-0.1), dict(rw_step=0.0), dict(alpha_update="hmc"),
    dict(learn_sigma2=True, a0=0.0), dict(sigma2=0.0),
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ChainConfig(PriorConfig(RELU), **kwargs)
    with pytest.raises(ValueError):
        ChainConfig(PriorConfig(IDENTITY), alpha_update="relu-exact")


# ---------------------------------------------------------------------------
# full sampler


def test_zero_information_run_recovers_prior_zero_fraction():
    D, _ = _instance(13, m=10, p=4)
    prior = PriorConfig(RELU, alpha0=0.5, tau_w=1.0)
    chain = run_chain(D, np.zeros(10), ChainConfig(prior, iterations=20_000, sigma2=1e12, seed=1))
    zeros = (chain.post() == 0.0).astype(float)
    se = mc_standard_error(zeros)
    assert np.all(np.abs(zeros.mean(0) - stats.norm.cdf(0.5)) <= 3 * se)


def _product_normal_posterior_mean(d, z, sigma2, tau):
    # prior of xi = alpha * w with alpha ~ N(0,1), w ~ N(0, tau^2) is K0(|xi|/tau) / (pi tau)
    def loglik(x):
        r = z - x * d
        return -(r @ r) / (2 * sigma2)

    ref = loglik(float(d @ z / (d @ d)))

    def f(x, k):
        return x ** k * special.k0(abs(x) / tau) * np.exp(loglik(x) - ref)

    num = integrate.quad(f, -20, 20, args=(1,), points=[0.0], limit=200)[0]
    den = integrate.quad(f, -20, 20, args=(0,), points=[0.0], limit=200)[0]
    return num / den


def test_scalar_identity_posterior_mean_against_quadrature():
    rng = np.random.default_rng(14)
    d = np.ones(6)
    z = 0.4 + rng.normal(size=6)
    sigma2, tau = 1.0, 0.8
    exact = _product_normal_posterior_mean(d, z, sigma2, tau)
    prior = PriorConfig(IDENTITY, tau_w=tau)
    chain = run_chain(d[:, None], z, ChainConfig(prior, iterations=40_000, sigma2=sigma2, seed=2, rw_step=1.0))
    post = chain.post()[:, 0]
    assert abs(post.mean() - exact) <= 3 * mc_standard_error(post)


def test_chains_are_bitwise_reproducible():
    D, z = _instance(15)
    cfg = ChainConfig(PriorConfig(RELU, alpha0=0.5), iterations=300, learn_sigma2=True, seed=3)
    a, b = run_chain(D, z, cfg), run_chain(D, z, cfg)
    assert a.alpha.tobytes() == b.alpha.tobytes()
    assert a.w.tobytes() == b.w.tobytes()
    assert a.sigma2.tobytes() == b.sigma2.tobytes()
    c = run_chain(D, z, ChainConfig(cfg.prior, iterations=300, learn_sigma2=True, seed=4))
    assert not np.array_equal(a.alpha, c.alpha)


@pytest.mark.parametrize("update", ["metropolis", "relu-exact"])
def test_relu_chain_has_exact_zeros_where_alpha_below_shift(update):
    D, z = _instance(16, p=5)
    cfg = ChainConfig(PriorConfig(RELU, alpha0=0.5), iterations=500, seed=5, alpha_update=update)
    chain = run_chain(D, z, cfg)
    assert_array_equal(chain.xi == 0.0, chain.alpha <= 0.5)
    assert (chain.xi == 0.0).any()
    assert np.all(chain.sigma2 > 0)


def test_acceptance_rates_strictly_between_zero_and_one():
    D, z = _instance(17, m=40, p=4)
    chain = run_chain(D, z, ChainConfig(PriorConfig(Activation.from_name("horseshoe")), iterations=2000,
                                        sigma2=0.1, seed=6))
    rate = chain.acceptance_rate
    assert np.all((rate > 0) & (rate < 1))
    assert chain.burn_in == 400


def test_exact_and_metropolis_updates_agree():
    rng = np.random.default_rng(18)
    D = rng.normal(size=(40, 4))
    xi = np.array([1.5, 0.0, -0.8, 0.0])
    z = D @ xi + 0.5 * rng.normal(size=40)
    prior = PriorConfig(RELU, alpha0=0.5, tau_w=1.5)
    runs = {}
    for update in ("metropolis", "relu-exact"):
        cfg = ChainConfig(prior, iterations=20_000, sigma2=0.25, seed=7, alpha_update=update)
        post = run_chain(D, z, cfg).post()
        runs[update] = (post.mean(0), mc_standard_error(post))
    (m1, s1), (m2, s2) = runs.values()
    assert np.all(np.abs(m1 - m2) <= 3 * np.sqrt(s1 ** 2 + s2 ** 2))


def test_chain_error_carries_iteration(monkeypatch):
    import bsindy.mcmc as mc

    real, calls = mc._draw_w, []

    def flaky(*args):
        calls.append(1)
        if len(calls) == 4:
            raise np.linalg.LinAlgError("not positive definite")
        return real(*args)

    monkeypatch.setattr(mc, "_draw_w", flaky)
    D, z = _instance(0)
    with pytest.raises(ChainError) as info:
        run_chain(D, z, ChainConfig(PriorConfig(RELU), iterations=10, seed=0))
    assert info.value.iteration == 3
    assert "iteration 3" in str(info.value)


def test_mismatched_rows_rejected():
    with pytest.raises(ValueError):
        run_chain(np.ones((4, 2)), np.ones(3), ChainConfig(PriorConfig(RELU)))
    with pytest.raises(ValueError, match="finite"):
        run_chain(np.ones((3, 2)), np.array([1.0, np.nan, 0.0]), ChainConfig(PriorConfig(RELU)))


# ---------------------------------------------------------------------------
# persistence


def _small_chain():
    D, z = _instance(19)
    cfg = ChainConfig(PriorConfig(RELU, alpha0=0.5), iterations=50, seed=8)
    return run_chain(D, z, cfg, labels=("a", "b", "c"))


def test_save_load_round_trip(tmp_path):
    chain = _small_chain()
    npz, sidecar = save_chain(chain, tmp_path / "chain", extra={"note": "x"})
    assert npz.name == "chain.npz" and sidecar.name == "chain.json"
    back = load_chain(tmp_path / "chain.npz")
    assert back.alpha.tobytes() == chain.alpha.tobytes()
    assert back.w.tobytes() == chain.w.tobytes()
    assert back.prior == chain.prior and back.labels == chain.labels
    assert back.burn_in == chain.burn_in
    assert json.loads(sidecar.read_text())["note"] == "x"


def test_load_rejects_corrupt_files(tmp_path):
    save_chain(_small_chain(), tmp_path / "c")
    (tmp_path / "c.npz").write_bytes(b"not a zip file")
    with pytest.raises(ValueError, match="corrupt"):
        load_chain(tmp_path / "c")
    save_chain(_small_chain(), tmp_path / "d")
    (tmp_path / "d.json").write_text("{")
    with pytest.raises(ValueError, match="corrupt"):
        load_chain(tmp_path / "d")
    save_chain(_small_chain(), tmp_path / "e")
    doc = json.loads((tmp_path / "e.json").read_text())
    doc["format_version"] = 99
    (tmp_path / "e.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        load_chain(tmp_path / "e")
    with pytest.raises(FileNotFoundError):
        load_chain(tmp_path / "missing")


def test_truncated_chain():
    chain = _small_chain()
    short = truncated(chain, 5)
    assert short.n_iter == 5 and short.burn_in == 5
    assert_array_equal(short.alpha, chain.alpha[:5])
