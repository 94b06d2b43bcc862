import math

import numpy as np
import pytest

from longcox.data_model import Cohort, SubjectRecord, TimeBasis, Visit
from longcox.lmm import (
    LmmError,
    LmmFit,
    LmmSpec,
    SIGMA2_FLOOR,
    blup,
    covariate_regressor,
    fit_lmm,
    marginal_loglik,
    posterior_draw,
    predict_exposure,
)
from longcox.numerics import RngStream, SpdMatrix

LINEAR = LmmSpec(fixed_basis=TimeBasis.polynomial(1))


def make_cohort(rng, n=200, beta=(0.0, 1.0), re_sd=(1.0, math.sqrt(0.5)), sigma=1.0,
                times=(0.0, 2.0, 4.0, 6.0)):
    subjects = []
    for i in range(n):
        u = rng.standard_normal(2) * re_sd
        ts = np.array(times)
        y = (beta[0] + u[0]) + (beta[1] + u[1]) * ts + sigma * rng.standard_normal(ts.size)
        subjects.append(
            SubjectRecord(id=f"s{i}", visits=tuple(Visit(t, v) for t, v in zip(ts, y)),
                          event_time=10.0, event=False)
        )
    return Cohort(subjects=tuple(subjects), truncated_at_event=True)


def manual_fit(beta, re_cov, sigma2, zeta=()):
    """LmmFit with hand-set parameters and zero parameter covariance."""
    beta = np.asarray(beta, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    re_cov = np.asarray(re_cov, dtype=float)
    q = re_cov.shape[0]
    n_par = beta.size + zeta.size + q * (q + 1) // 2 + 1
    w, v = np.linalg.eigh(re_cov)
    factor = v * np.sqrt(np.clip(w, 0, None))
    return LmmFit(beta=beta, zeta=zeta, re_cov=SpdMatrix(re_cov + 1e-12 * np.eye(q)),
                  sigma2=sigma2, param_cov=np.zeros((n_par, n_par)), loglik=0.0,
                  re_chol=factor)


class TestFitLmm:
    def test_self_generation_recovery(self):
        rng = np.random.default_rng(8)
        c = make_cohort(rng, n=2000)
        fit = fit_lmm(c, LINEAR)
        se = np.sqrt(np.diag(fit.param_cov))
        assert abs(fit.beta[0] - 0.0) < 3 * se[0]
        assert abs(fit.beta[1] - 1.0) < 3 * se[1]
        assert abs(fit.re_cov.entries[0, 0] - 1.0) < 0.15
        assert abs(fit.re_cov.entries[1, 1] - 0.5) < 0.08
        assert abs(fit.sigma2 - 1.0) < 0.08

    def test_matches_dense_gls_loglik(self):
        # balanced 2-visit design: Woodbury-based likelihood equals the dense
        # multivariate-normal evaluation at the same parameters
        rng = np.random.default_rng(4)
        c = make_cohort(rng, n=40, times=(0.0, 2.0))
        beta = np.array([0.2, 0.8])
        B = np.array([[1.1, 0.2], [0.2, 0.6]])
        sigma2 = 0.9
        got = marginal_loglik(c, LINEAR, beta, B, sigma2)
        Z = np.array([[1.0, 0.0], [1.0, 2.0]])
        V = Z @ B @ Z.T + sigma2 * np.eye(2)
        sign, logdet = np.linalg.slogdet(V)
        Vinv = np.linalg.inv(V)
        expected = 0.0
        for s in c.subjects:
            r = s.visit_values - Z @ beta
            expected += -0.5 * (2 * math.log(2 * math.pi) + logdet + r @ Vinv @ r)
        assert got == pytest.approx(expected, rel=1e-8)

    def test_noiseless_interpolation(self):
        rng = np.random.default_rng(2)
        c = make_cohort(rng, n=150, sigma=0.0)
        fit = fit_lmm(c, LINEAR)
        assert fit.sigma2 < 1e-6
        s = c.subjects[0]
        path = predict_exposure(fit, s, LINEAR, mode="mean")
        assert np.allclose(path(s.visit_times), s.visit_values, atol=1e-5)

    def test_per_subject_block_sum(self):
        rng = np.random.default_rng(9)
        c = make_cohort(rng, n=12)
        beta, B, s2 = np.array([0.1, 0.9]), np.array([[1.0, 0.1], [0.1, 0.5]]), 1.2
        total = marginal_loglik(c, LINEAR, beta, B, s2)
        parts = sum(
            marginal_loglik(Cohort(subjects=(s,), truncated_at_event=True), LINEAR, beta, B, s2)
            for s in c.subjects
        )
        assert total == pytest.approx(parts, rel=1e-12)

    def test_duplicated_cohort_doubles_loglik_and_keeps_estimates(self):
        rng = np.random.default_rng(14)
        c = make_cohort(rng, n=120)
        doubled = Cohort(
            subjects=tuple(c.subjects) + tuple(
                SubjectRecord(id=s.id + "_dup", visits=s.visits, event_time=s.event_time,
                              event=s.event) for s in c.subjects
            ),
            truncated_at_event=True,
        )
        beta, B, s2 = np.array([0.0, 1.0]), np.diag([1.0, 0.5]), 1.0
        assert marginal_loglik(doubled, LINEAR, beta, B, s2) == pytest.approx(
            2.0 * marginal_loglik(c, LINEAR, beta, B, s2), rel=1e-12
        )
        f1, f2 = fit_lmm(c, LINEAR, tol=1e-6), fit_lmm(doubled, LINEAR, tol=1e-6)
        assert np.allclose(f1.beta, f2.beta, atol=1e-5)
        assert np.allclose(f1.re_cov.entries, f2.re_cov.entries, atol=1e-4)
        assert f2.loglik == pytest.approx(2.0 * f1.loglik, rel=1e-6)

    def test_too_few_visits_rejected(self):
        c = Cohort(subjects=(SubjectRecord(id="a", visits=(Visit(0.0, 1.0),),
                                           event_time=1.0, event=True),),
                   truncated_at_event=True)
        with pytest.raises(LmmError):
            fit_lmm(c, LINEAR)

    def test_analytic_score_matches_finite_differences(self):
        from longcox.lmm import _Designs, _unpack
        from longcox.numerics import fd_gradient

        rng = np.random.default_rng(3)
        c = make_cohort(rng, n=25, times=(0.0, 2.0, 4.0))
        designs = _Designs(c, LINEAR)

        def obj(th):
            b, L, s2 = _unpack(th, 2, 2)
            return designs.loglik_score(b, L, s2, want_score=False)[0]

        def grad(th):
            b, L, s2 = _unpack(th, 2, 2)
            _, (gb, gL, gs2) = designs.loglik_score(b, L, s2)
            return np.concatenate([gb, gL[np.tril_indices(2)],
                                   [gs2 * math.exp(2.0 * th[-1])]])

        for _ in range(4):
            th = rng.standard_normal(6) * 0.4 + np.array([0, 1, 1, 0, 0.7, 0])
            ga, gf = grad(th), fd_gradient(obj, th)
            assert np.all(np.abs(ga - gf) <= 1e-5 * np.maximum(np.abs(gf), 1.0))


class TestBlup:
    def test_zero_visits_gives_zero_vector(self):
        fit = manual_fit([0.0, 1.0], np.diag([1.0, 0.5]), 1.0)
        s = SubjectRecord(id="a", visits=(), event_time=5.0, event=True)
        assert np.array_equal(blup(fit, s, LINEAR), np.zeros(2))

    def test_one_visit_random_intercept_shrinkage(self):
        # b^2/(b^2+sigma^2) * residual with b^2=1, sigma^2=1, residual=2 -> 1.0
        spec = LmmSpec(fixed_basis=TimeBasis.polynomial(1),
                       random_basis=TimeBasis.polynomial(0))
        fit = manual_fit([0.0, 0.0], np.array([[1.0]]), 1.0)
        s = SubjectRecord(id="a", visits=(Visit(0.0, 2.0),), event_time=5.0, event=True)
        assert blup(fit, s, spec) == pytest.approx([1.0], abs=1e-12)

    def test_sigma_to_zero_recovers_least_squares(self):
        rng = np.random.default_rng(5)
        u_true = np.array([0.7, -0.3])
        ts = np.array([0.0, 2.0, 4.0, 6.0])
        y = u_true[0] + (1.0 + u_true[1]) * ts  # beta=(0,1) plus exact u
        s = SubjectRecord(id="a", visits=tuple(Visit(t, v) for t, v in zip(ts, y)),
                          event_time=10.0, event=False)
        fit = manual_fit([0.0, 1.0], np.diag([1.0, 0.5]), 1e-8)
        assert np.allclose(blup(fit, s, LINEAR), u_true, atol=1e-6)

    def test_linear_response_to_data_shift(self):
        # blup is affine in y; a shift Z delta moves the blup by
        # (I - C B^{-1}) delta, which approaches delta only as sigma -> 0
        rng = np.random.default_rng(6)
        B = np.diag([1.0, 0.5])
        sigma2 = 0.8
        ts = np.array([0.0, 2.0, 4.0])
        Z = np.column_stack([np.ones_like(ts), ts])
        y = rng.standard_normal(ts.size)
        delta = np.array([0.4, -0.2])
        fit = manual_fit([0.0, 0.0], B, sigma2)

        def blup_of(values):
            s = SubjectRecord(id="a", visits=tuple(Visit(t, v) for t, v in zip(ts, values)),
                              event_time=10.0, event=False)
            return blup(fit, s, LINEAR)

        C = np.linalg.inv(np.linalg.inv(B) + Z.T @ Z / sigma2)
        expected_shift = (np.eye(2) - C @ np.linalg.inv(B)) @ delta
        got_shift = blup_of(y + Z @ delta) - blup_of(y)
        assert np.allclose(got_shift, expected_shift, atol=1e-10)

        # and the exact-shift identity holds in the noiseless limit
        fit0 = manual_fit([0.0, 0.0], B, 1e-12)

        def blup0(values):
            s = SubjectRecord(id="a", visits=tuple(Visit(t, v) for t, v in zip(ts, values)),
                              event_time=10.0, event=False)
            return blup(fit0, s, LINEAR)

        assert np.allclose(blup0(y + Z @ delta) - blup0(y), delta, atol=1e-8)


class TestPosteriorDraw:
    def test_degenerate_posterior_zero_visits(self):
        fit = manual_fit([0.3, 1.2], np.diag([1.0, 0.5]), 1.0)
        s = SubjectRecord(id="a", visits=(), event_time=5.0, event=True)
        beta_t, zeta_t, u_t = posterior_draw(fit, s, LINEAR, RngStream(0))
        assert np.array_equal(beta_t, [0.3, 1.2])
        assert zeta_t.size == 0
        assert np.array_equal(u_t, np.zeros(2))

    def test_draw_mean_matches_blup(self):
        rng = np.random.default_rng(7)
        ts = np.array([0.0, 2.0, 4.0])
        y = 0.5 + 1.3 * ts + rng.standard_normal(3)
        s = SubjectRecord(id="a", visits=tuple(Visit(t, v) for t, v in zip(ts, y)),
                          event_time=10.0, event=False)
        fit = manual_fit([0.0, 1.0], np.diag([1.0, 0.5]), 1.0)
        target = blup(fit, s, LINEAR)
        stream = RngStream(123, 5)
        draws = np.vstack([posterior_draw(fit, s, LINEAR, stream)[2] for _ in range(10_000)])
        Z = np.column_stack([np.ones_like(ts), ts])
        C = np.linalg.inv(np.linalg.inv(np.diag([1.0, 0.5])) + Z.T @ Z / 1.0)
        tol = 4.0 * np.sqrt(np.diag(C)) / 100.0  # 4 * posterior SD / sqrt(10^4)
        assert np.all(np.abs(draws.mean(axis=0) - target) < tol)

    def test_distinct_streams_differ(self):
        fit = manual_fit([0.0, 1.0], np.diag([1.0, 0.5]), 1.0)
        s = SubjectRecord(id="a", visits=(Visit(0.0, 1.0), Visit(2.0, 3.0)),
                          event_time=5.0, event=True)
        u1 = posterior_draw(fit, s, LINEAR, RngStream(9, 1))[2]
        u2 = posterior_draw(fit, s, LINEAR, RngStream(9, 2))[2]
        assert not np.array_equal(u1, u2)


class TestPredictExposure:
    def test_population_curve_for_zero_visits(self):
        fit = manual_fit([0.4, 1.1], np.diag([1.0, 0.5]), 1.0)
        s = SubjectRecord(id="a", visits=(), event_time=8.0, event=True)
        path = predict_exposure(fit, s, LINEAR, mode="mean")
        ts = np.array([0.0, 3.0, 7.5])
        assert np.allclose(path(ts), 0.4 + 1.1 * ts)

    def test_noiseless_line_reproduced_everywhere(self):
        rng = np.random.default_rng(10)
        c = make_cohort(rng, n=150, sigma=0.0)
        fit = fit_lmm(c, LINEAR)
        s = c.subjects[3]
        a = s.visit_values[0]
        b = (s.visit_values[1] - s.visit_values[0]) / (s.visit_times[1] - s.visit_times[0])
        path = predict_exposure(fit, s, LINEAR, mode="mean")
        ts = np.linspace(0.0, 10.0, 23)
        assert np.allclose(path(ts), a + b * ts, atol=1e-6)

    def test_degenerate_draw_equals_mean_mode(self):
        fit = manual_fit([0.2, 0.9], np.diag([1.0, 0.5]), 1e-12)
        ts = np.array([0.0, 2.0, 4.0])
        y = 0.2 + 1.4 * ts
        s = SubjectRecord(id="a", visits=tuple(Visit(t, v) for t, v in zip(ts, y)),
                          event_time=9.0, event=True)
        mean_path = predict_exposure(fit, s, LINEAR, mode="mean")
        draw_path = predict_exposure(fit, s, LINEAR, mode="draw", stream=RngStream(3))
        grid = np.linspace(0, 9, 19)
        assert np.allclose(mean_path(grid), draw_path(grid), atol=1e-5)

    def test_extra_regressor_enters_prediction(self):
        spec = LmmSpec(fixed_basis=TimeBasis.polynomial(1),
                       extra_regressors=(covariate_regressor("age"),))
        fit = manual_fit([0.0, 1.0], np.diag([1.0, 0.5]), 1.0, zeta=[0.1])
        s = SubjectRecord(id="a", visits=(), event_time=5.0, event=False,
                          baseline_covariates={"age": 70.0})
        path = predict_exposure(fit, s, spec, mode="mean")
        assert path(2.0) == pytest.approx(2.0 + 0.1 * 70.0)
