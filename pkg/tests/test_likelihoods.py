import numpy as np
import pytest

from stlgm.likelihoods import (
    CURVATURE_FLOOR,
    InvalidOutcome,
    ObservationFamily,
    grad_hess,
    log_pmf,
    loglik_total,
    neg_hessian_floor,
    simulate_response,
)

ZINB = ObservationFamily("zinb")
ZIP = ObservationFamily("zip")
NB = ObservationFamily("nb")
POISSON = ObservationFamily("poisson")
BERNOULLI = ObservationFamily("bernoulli_logit")


class TestLogPmf:
    def test_zip_degenerate_mean(self):
        # eta -> -inf gives mu -> 0, so P(0) -> 1
        lp = log_pmf(ZIP, 0, -800.0, {"psi": 0.5})
        assert lp == pytest.approx(0.0, abs=1e-12)

    def test_zinb_psi_zero_geometric_oracle(self):
        # size=1 negative binomial is geometric: P(3) = (2/3)^3 * (1/3)
        lp = log_pmf(ZINB, 3, np.log(2.0), {"psi": 0.0, "size": 1.0})
        assert lp == pytest.approx(np.log((2 / 3) ** 3 * (1 / 3)), abs=1e-12)
        assert lp == pytest.approx(-2.3150, abs=2e-4)

    def test_zinb_paper_values_normalize(self):
        ys = np.arange(0, 5001)
        lp = log_pmf(ZINB, ys, np.full(ys.shape, np.log(5.28)),
                     {"psi": 0.622, "size": 0.525})
        assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-8)

    def test_all_families_normalize(self):
        cases = [
            (ZINB, {"psi": 0.3, "size": 2.0}, np.log(4.0)),
            (ZIP, {"psi": 0.6, }, np.log(3.0)),
            (NB, {"size": 0.7}, np.log(2.5)),
            (POISSON, {}, np.log(6.0)),
        ]
        ys = np.arange(0, 4000)
        for fam, hyper, eta in cases:
            p = np.exp(log_pmf(fam, ys, np.full(ys.shape, eta), hyper))
            assert p.sum() == pytest.approx(1.0, abs=1e-8), fam.kind
        for y in (0, 1):
            pass
        p_bern = np.exp([log_pmf(BERNOULLI, y, 0.37) for y in (0, 1)])
        assert p_bern.sum() == pytest.approx(1.0, abs=1e-12)

    def test_zero_inflation_reductions_exact(self):
        ys = np.arange(0, 30)
        eta = np.linspace(-1.0, 2.0, 30)
        zinb = log_pmf(ZINB, ys, eta, {"psi": 0.0, "size": 1.3})
        nb = log_pmf(NB, ys, eta, {"size": 1.3})
        assert np.max(np.abs(zinb - nb)) < 1e-12
        zip_ = log_pmf(ZIP, ys, eta, {"psi": 0.0})
        poi = log_pmf(POISSON, ys, eta)
        assert np.max(np.abs(zip_ - poi)) < 1e-12

    def test_zinb_to_zip_large_size_limit(self):
        # the exact gap between NB(size=1e6) and Poisson log-pmfs grows like
        # ((y-mu)^2 - y)/2e6, so the 1e-4 tolerance is combined abs/rel
        ys = np.arange(0, 51)
        for mu in (0.5, 5.0, 20.0):
            eta = np.full(ys.shape, np.log(mu))
            zinb = log_pmf(ZINB, ys, eta, {"psi": 0.4, "size": 1e6})
            zip_ = log_pmf(ZIP, ys, eta, {"psi": 0.4})
            for a, b in zip(zinb, zip_):
                assert a == pytest.approx(b, rel=1e-4, abs=1e-4)

    def test_offsets_shift_mean(self):
        lp_off = log_pmf(POISSON, 3, 0.0, log_offset=np.log(2.0))
        lp_eta = log_pmf(POISSON, 3, np.log(2.0))
        assert lp_off == pytest.approx(lp_eta, abs=1e-12)

    def test_invalid_outcomes(self):
        with pytest.raises(InvalidOutcome):
            log_pmf(POISSON, -1, 0.0)
        with pytest.raises(InvalidOutcome):
            log_pmf(BERNOULLI, 2, 0.0)
        with pytest.raises(InvalidOutcome):
            log_pmf(NB, 1.5, 0.0, {"size": 1.0})


class TestGradHess:
    def test_poisson_score_zero_at_mle(self):
        g, _ = grad_hess(POISSON, 7, np.log(7.0))
        assert g == pytest.approx(0.0, abs=1e-12)

    def test_bernoulli_at_zero(self):
        g, h = grad_hess(BERNOULLI, 1, 0.0)
        assert g == pytest.approx(0.5)
        assert h == pytest.approx(-0.25)

    def test_zinb_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        h_step = 1e-5
        checked = 0
        for _ in range(200):
            y = int(rng.integers(0, 30))
            eta = float(rng.uniform(-3.0, 3.0))
            psi = float(rng.uniform(0.05, 0.9))
            size = float(rng.uniform(0.2, 5.0))
            hyper = {"psi": psi, "size": size}
            g, h = grad_hess(ZINB, y, eta, hyper)
            lp = lambda e: log_pmf(ZINB, y, e, hyper)
            g_fd = (lp(eta + h_step) - lp(eta - h_step)) / (2 * h_step)
            h_fd = (lp(eta + h_step) - 2 * lp(eta) + lp(eta - h_step)) / h_step ** 2
            assert g == pytest.approx(g_fd, rel=1e-5, abs=1e-7)
            assert h == pytest.approx(h_fd, rel=1e-3, abs=1e-4)
            checked += 1
        assert checked == 200

    def test_all_families_match_finite_differences(self):
        rng = np.random.default_rng(1)
        h_step = 1e-5
        fams = [
            (ZIP, lambda: {"psi": float(rng.uniform(0.1, 0.9))}),
            (NB, lambda: {"size": float(rng.uniform(0.3, 4.0))}),
            (POISSON, lambda: {}),
            (BERNOULLI, lambda: {}),
        ]
        for fam, mk in fams:
            for _ in range(50):
                if fam.kind == "bernoulli_logit":
                    y = int(rng.integers(0, 2))
                else:
                    y = int(rng.integers(0, 20))
                eta = float(rng.uniform(-2.5, 2.5))
                hyper = mk()
                g, h = grad_hess(fam, y, eta, hyper)
                lp = lambda e: log_pmf(fam, y, e, hyper)
                g_fd = (lp(eta + h_step) - lp(eta - h_step)) / (2 * h_step)
                assert g == pytest.approx(g_fd, rel=1e-5, abs=1e-7), fam.kind


class TestCurvatureFloor:
    def test_values(self):
        assert neg_hessian_floor(0.5) == 0.5
        assert neg_hessian_floor(0.0) == CURVATURE_FLOOR
        assert neg_hessian_floor(-1e-12) == CURVATURE_FLOOR


class TestSimulate:
    def test_psi_one_all_zeros(self):
        y = simulate_response(ZINB, np.zeros(500), 0.0,
                              {"psi": 1.0, "size": 1.0}, seed=0)
        assert np.all(y == 0)

    def test_poisson_mean(self):
        y = simulate_response(POISSON, np.full(100000, np.log(4.0)), 0.0,
                              seed=1)
        assert abs(y.mean() - 4.0) < 0.05

    def test_zinb_zero_fraction_lower_bound(self):
        y = simulate_response(ZINB, np.full(100000, np.log(8.0)), 0.0,
                              {"psi": 0.52, "size": 2.0}, seed=2)
        assert np.mean(y == 0) >= 0.50

    def test_bernoulli_rate(self):
        y = simulate_response(BERNOULLI, np.zeros(100000), 0.0, seed=3)
        assert abs(y.mean() - 0.5) < 0.01

    def test_seed_reproducibility(self):
        a = simulate_response(ZINB, np.full(100, 1.0), 0.0,
                              {"psi": 0.5, "size": 1.0}, seed=7)
        b = simulate_response(ZINB, np.full(100, 1.0), 0.0,
                              {"psi": 0.5, "size": 1.0}, seed=7)
        assert np.array_equal(a, b)

    def test_nb_moments(self):
        mu, size = 5.0, 0.8
        y = simulate_response(NB, np.full(200000, np.log(mu)), 0.0,
                              {"size": size}, seed=11)
        assert y.mean() == pytest.approx(mu, rel=0.02)
        assert y.var() == pytest.approx(mu + mu * mu / size, rel=0.05)


class TestDeterministicReduction:
    def test_total_is_order_stable(self):
        rng = np.random.default_rng(5)
        y = rng.integers(0, 10, 1000)
        eta = rng.uniform(-1, 1, 1000)
        a = loglik_total(ZINB, y, eta, {"psi": 0.3, "size": 1.0})
        b = loglik_total(ZINB, y, eta, {"psi": 0.3, "size": 1.0})
        assert a == b
